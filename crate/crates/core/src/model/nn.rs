//! Minimal layer library with explicit forward/backward passes.
//!
//! Activations flow through convolutional stages as `[C, N, H, W]` arrays
//! (channel-major batches). That layout lets a convolution over the whole
//! batch be a single `(Cout × C·k·k) · (C·k·k × N·H·W)` matrix product whose
//! result is already in `[Cout, N, H, W]` order.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{
    s, Array1, Array2, Array4, ArrayD, ArrayView2, Axis, IxDyn, LinalgScalar, ScalarOperand,
    Zip,
};
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floating point element type usable by the network.
pub trait Scalar:
    LinalgScalar
    + Float
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
}

impl<T> Scalar for T where
    T: LinalgScalar
        + Float
        + ScalarOperand
        + Send
        + Sync
        + Debug
        + Default
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + 'static
{
}

#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from(x).expect("f64 is representable in every Scalar")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Feature extractor weights; frozen during the first training phase.
    Backbone,
    /// Projection, attention and classifier weights; always trainable.
    Head,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
}

/// Flat, named storage for every tensor of a model.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry>,
    tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, group });
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.tensors[id.0]
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamEntry, &ArrayD<T>)> {
        self.entries.iter().zip(self.tensors.iter())
    }

    /// Number of scalar values in the given group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(e, _)| e.group == group)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Order-sensitive FNV-1a digest over the bit patterns of a group.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (e, t) in self.iter() {
            if e.group != group {
                continue;
            }
            for v in t.iter() {
                let bits = v.to_f64().unwrap_or(f64::NAN).to_bits();
                for b in bits.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn map_scalar<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| cast::<U>(v.to_f64().unwrap_or(f64::NAN))))
                .collect(),
        }
    }
}

/// Sparse gradient accumulator aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    tensors: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn for_params(params: &ParamSet<T>) -> Self {
        Self {
            tensors: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.tensors[id.0].as_ref()
    }

    pub fn accumulate<D: ndarray::Dimension>(&mut self, id: ParamId, g: ndarray::ArrayView<T, D>) {
        let g = g.into_dyn();
        match &mut self.tensors[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g.to_owned()),
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: Grads<T>) {
        for (slot, g) in self.tensors.iter_mut().zip(other.tensors) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.tensors.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub fn uniform_array<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || cast(rng.gen_range(-bound..=bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvCache<T> {
    col: Array2<T>,
    input_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = params.register(
            format!("{name}.weight"),
            group,
            uniform_array(rng, &[out_channels, in_channels, kernel, kernel], bound),
        );
        let bias = bias.then(|| {
            params.register(
                format!("{name}.bias"),
                group,
                ArrayD::zeros(IxDyn(&[out_channels])),
            )
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn weight_matrix<'a, T: Scalar>(&self, params: &'a ParamSet<T>) -> ArrayView2<'a, T> {
        params
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("conv weight is contiguous")
    }

    fn apply<T: Scalar>(&self, params: &ParamSet<T>, col: &Array2<T>, n: usize, ho: usize, wo: usize) -> Array4<T> {
        let mut out = Array2::<T>::zeros((self.out_channels, n * ho * wo));
        general_mat_mul(T::one(), &self.weight_matrix(params), col, T::zero(), &mut out);
        if let Some(b) = self.bias {
            let b = params.get(b);
            for (mut row, &bv) in out.outer_iter_mut().zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        out.into_shape_with_order((self.out_channels, n, ho, wo))
            .expect("contiguous conv output")
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> Array4<T> {
        let (_, n, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let col = im2col(x, self.kernel, self.stride, self.padding, ho, wo);
        self.apply(params, &col, n, ho, wo)
    }

    pub fn forward_train<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let (_, n, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let col = im2col(x, self.kernel, self.stride, self.padding, ho, wo);
        let y = self.apply(params, &col, n, ho, wo);
        (
            y,
            ConvCache {
                col,
                input_dim: x.dim(),
            },
        )
    }

    /// Accumulates weight gradients and, when `need_input_grad`, returns the
    /// gradient with respect to the layer input.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &ConvCache<T>,
        dy: &Array4<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let (cout, n, ho, wo) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((cout, n * ho * wo))
            .expect("contiguous gradient");
        let ckk = self.in_channels * self.kernel * self.kernel;
        let mut dw = Array2::<T>::zeros((cout, ckk));
        general_mat_mul(T::one(), &dy2, &cache.col.t(), T::zero(), &mut dw);
        grads.accumulate(
            self.weight,
            dw.into_shape_with_order((cout, self.in_channels, self.kernel, self.kernel))
                .expect("contiguous")
                .view(),
        );
        if let Some(b) = self.bias {
            grads.accumulate(b, dy2.sum_axis(Axis(1)).view());
        }
        if !need_input_grad {
            return None;
        }
        let mut dcol = Array2::<T>::zeros((ckk, n * ho * wo));
        general_mat_mul(T::one(), &self.weight_matrix(params).t(), &dy2, T::zero(), &mut dcol);
        Some(col2im(&dcol, cache.input_dim, self.kernel, self.stride, self.padding, ho, wo))
    }
}

fn im2col<T: Scalar>(x: &Array4<T>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<T> {
    let (c, n, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cols_per_row = n * ho * wo;
    let mut col = Array2::<T>::zeros((c * k * k, cols_per_row));
    let cs = col.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cs[row * cols_per_row..(row + 1) * cols_per_row];
                for ni in 0..n {
                    let plane = &xs[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let drow = &mut dst[(ni * ho + oi) * wo..(ni * ho + oi + 1) * wo];
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                *d = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(
    dcol: &Array2<T>,
    dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<T> {
    let (c, n, h, w) = dim;
    let mut dx = Array4::<T>::zeros(dim);
    let ds = dx.as_slice_mut().expect("fresh array");
    let src_all = dcol.as_slice().expect("standard layout");
    let cols_per_row = n * ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &src_all[row * cols_per_row..(row + 1) * cols_per_row];
                for ni in 0..n {
                    let plane = &mut ds[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let srow = &src[(ni * ho + oi) * wo..(ni * ho + oi + 1) * wo];
                        let drow = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                        for (oj, &g) in srow.iter().enumerate() {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                drow[jj as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Batch normalization with frozen running statistics (inference form).
/// The affine scale and shift stay trainable.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

pub struct BatchNormCache<T> {
    normalized: Array4<T>,
    scale: Array1<T>,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, group: ParamGroup, channels: usize) -> Self {
        let shape = IxDyn(&[channels]);
        Self {
            gamma: params.register(format!("{name}.weight"), group, ArrayD::ones(shape.clone())),
            beta: params.register(format!("{name}.bias"), group, ArrayD::zeros(shape.clone())),
            running_mean: params.register(
                format!("{name}.running_mean"),
                ParamGroup::Buffer,
                ArrayD::zeros(shape.clone()),
            ),
            running_var: params.register(format!("{name}.running_var"), ParamGroup::Buffer, ArrayD::ones(shape)),
            eps: 1e-5,
        }
    }

    fn coefficients<T: Scalar>(&self, params: &ParamSet<T>) -> (Array1<T>, Array1<T>, Array1<T>) {
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let mean = params.get(self.running_mean);
        let var = params.get(self.running_var);
        let eps = cast::<T>(self.eps);
        let inv_std: Array1<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let scale: Array1<T> = gamma.iter().zip(inv_std.iter()).map(|(&g, &s)| g * s).collect();
        let shift: Array1<T> = beta
            .iter()
            .zip(mean.iter())
            .zip(scale.iter())
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift, inv_std)
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> Array4<T> {
        let (scale, shift, _) = self.coefficients(params);
        let mut y = x.clone();
        for (ci, mut plane) in y.outer_iter_mut().enumerate() {
            let (s, b) = (scale[ci], shift[ci]);
            plane.mapv_inplace(|v| v * s + b);
        }
        y
    }

    pub fn forward_train<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array4<T>, BatchNormCache<T>) {
        let (scale, shift, inv_std) = self.coefficients(params);
        let mean = params.get(self.running_mean);
        let mut normalized = x.clone();
        for (ci, mut plane) in normalized.outer_iter_mut().enumerate() {
            let (m, is) = (mean[ci], inv_std[ci]);
            plane.mapv_inplace(|v| (v - m) * is);
        }
        let mut y = x.clone();
        for (ci, mut plane) in y.outer_iter_mut().enumerate() {
            let (s, b) = (scale[ci], shift[ci]);
            plane.mapv_inplace(|v| v * s + b);
        }
        (y, BatchNormCache { normalized, scale })
    }

    pub fn backward<T: Scalar>(&self, cache: &BatchNormCache<T>, dy: &Array4<T>, grads: &mut Grads<T>) -> Array4<T> {
        let c = dy.dim().0;
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        let mut dx = dy.clone();
        for ci in 0..c {
            let g = dy.index_axis(Axis(0), ci);
            let xh = cache.normalized.index_axis(Axis(0), ci);
            dbeta[ci] = g.sum();
            dgamma[ci] = Zip::from(&g).and(&xh).fold(T::zero(), |acc, &a, &b| acc + a * b);
            let s = cache.scale[ci];
            dx.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * s);
        }
        grads.accumulate(self.gamma, dgamma.view());
        grads.accumulate(self.beta, dbeta.view());
        dx
    }
}

pub fn relu<T: Scalar>(mut x: Array4<T>) -> Array4<T> {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    x
}

/// Backward of ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Array4<T>, mut dy: Array4<T>) -> Array4<T> {
    Zip::from(&mut dy).and(y).for_each(|g, &out| {
        if out <= T::zero() {
            *g = T::zero();
        }
    });
    dy
}

#[derive(Clone, Copy, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct MaxPoolCache {
    argmax: Vec<u32>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&self, x: &Array4<T>) -> Array4<T> {
        self.forward_train(x).0
    }

    pub fn forward_train<T: Scalar>(&self, x: &Array4<T>) -> (Array4<T>, MaxPoolCache) {
        let (c, n, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<T>::zeros((c, n, ho, wo));
        let mut argmax = vec![0u32; c * n * ho * wo];
        let ys = y.as_slice_mut().expect("fresh array");
        for plane_idx in 0..c * n {
            let plane = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_at = 0usize;
                    for ki in 0..self.kernel {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let at = ii as usize * w + jj as usize;
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = (plane_idx * ho + oi) * wo + oj;
                    ys[o] = best;
                    argmax[o] = best_at as u32;
                }
            }
        }
        (
            y,
            MaxPoolCache {
                argmax,
                input_dim: (c, n, h, w),
            },
        )
    }

    pub fn backward<T: Scalar>(&self, cache: &MaxPoolCache, dy: &Array4<T>) -> Array4<T> {
        let (c, n, h, w) = cache.input_dim;
        let (_, _, ho, wo) = dy.dim();
        let mut dx = Array4::<T>::zeros(cache.input_dim);
        let dxs = dx.as_slice_mut().expect("fresh array");
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        for plane_idx in 0..c * n {
            for o in plane_idx * ho * wo..(plane_idx + 1) * ho * wo {
                dxs[plane_idx * h * w + cache.argmax[o] as usize] += dys[o];
            }
        }
        dx
    }
}

/// `[C, N, H, W]` → `[N, C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (c, n, h, w) = x.dim();
    let inv = cast::<T>(1.0 / (h * w) as f64);
    let mut out = Array2::<T>::zeros((n, c));
    for ci in 0..c {
        for ni in 0..n {
            out[[ni, ci]] = x.slice(s![ci, ni, .., ..]).sum() * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Array2<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (c, n, h, w) = dim;
    let inv = cast::<T>(1.0 / (h * w) as f64);
    let mut dx = Array4::<T>::zeros(dim);
    for ci in 0..c {
        for ni in 0..n {
            dx.slice_mut(s![ci, ni, .., ..]).fill(dy[[ni, ci]] * inv);
        }
    }
    dx
}

/// Fully connected layer on row-major `[N, in]` batches.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_features: usize,
        out_features: usize,
        bias: bool,
        bound: f64,
    ) -> Self {
        let weight = params.register(
            format!("{name}.weight"),
            group,
            uniform_array(rng, &[out_features, in_features], bound),
        );
        let bias = bias.then(|| params.register(format!("{name}.bias"), group, ArrayD::zeros(IxDyn(&[out_features]))));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn weight_matrix<'a, T: Scalar>(&self, params: &'a ParamSet<T>) -> ArrayView2<'a, T> {
        params
            .get(self.weight)
            .view()
            .into_dimensionality()
            .expect("linear weight is 2-d")
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight_matrix(params).t());
        if let Some(b) = self.bias {
            let b = params.get(b).view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
            y += &b;
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &ArrayView2<T>,
        dy: &Array2<T>,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        grads.accumulate(self.weight, dy.t().dot(x).view());
        if let Some(b) = self.bias {
            grads.accumulate(b, dy.sum_axis(Axis(0)).view());
        }
        dy.dot(&self.weight_matrix(params))
    }
}
