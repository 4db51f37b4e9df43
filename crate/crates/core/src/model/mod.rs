//! Attention-pooled multiple-instance classifier.
//!
//! Per patch `x_k`, the backbone and a projection produce an embedding
//! `h_k ∈ R^M`. Attention scores `s_k = wᵀ tanh(V h_k)` are softmaxed into
//! weights `a_k`, the bag embedding is `z = Σ a_k h_k`, and a single affine
//! layer followed by a sigmoid gives `p(y = 1 | X)`.

pub mod backbone;
pub mod checkpoint;
pub mod nn;

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneKind, IMAGENET_MEAN, IMAGENET_STD};
use nn::{cast, Grads, Linear, ParamGroup, ParamSet, Scalar};

use crate::error::{Error, Result};
use crate::patchbag::PatchBag;

pub const DEFAULT_EMBED_DIM: usize = 128;
pub const DEFAULT_ATTENTION_DIM: usize = 128;

/// Patches per backbone call during inference over large bags.
const FEATURE_CHUNK: usize = 256;

/// Lower/upper clamp applied to probabilities inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub patch_size: usize,
    /// Embedding width M.
    pub embed_dim: usize,
    /// Attention hidden width L.
    pub attention_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Resnet34Pretrained,
            patch_size: 64,
            embed_dim: DEFAULT_EMBED_DIM,
            attention_dim: DEFAULT_ATTENTION_DIM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.attention_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if let BackboneKind::SmallCnn { widths } = &self.backbone {
            if widths.iter().any(|&w| w == 0) {
                return Err(Error::invalid("small-cnn widths must be positive"));
            }
            if self.patch_size < 4 {
                return Err(Error::invalid("small-cnn needs patches of at least 4 pixels"));
            }
        }
        if self.backbone == BackboneKind::Resnet34Pretrained && self.patch_size < 32 {
            return Err(Error::invalid("resnet34 needs patches of at least 32 pixels"));
        }
        Ok(())
    }
}

/// Per-patch embeddings `H` (`K × M`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet<T> {
    pub h: Array2<T>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn new(h: Array2<T>) -> Result<Self> {
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(Error::invalid("feature set must be non-empty"));
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite patch embedding".into()));
        }
        Ok(Self { h })
    }

    pub fn bag_size(&self) -> usize {
        self.h.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.h.ncols()
    }
}

/// Attention scoring network: `V` is `L × M`, `w` has length `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub v: Array2<T>,
    pub w: Array1<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(v: Array2<T>, w: Array1<T>) -> Result<Self> {
        if v.nrows() != w.len() {
            return Err(Error::invalid(format!(
                "attention V is {}×{} but w has length {}",
                v.nrows(),
                v.ncols(),
                w.len()
            )));
        }
        if !v.iter().chain(w.iter()).all(|x| x.is_finite()) {
            return Err(Error::Numeric("non-finite attention parameter".into()));
        }
        Ok(Self { v, w })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.len()
    }
}

/// Classifier ρ(z) = weightᵀ z + bias.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub weight: Array1<T>,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    pub weights: Array1<T>,
    pub z: Array1<T>,
    pub logit: T,
    pub probability: T,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax; non-finite scores are an error.
pub fn softmax<T: Scalar>(scores: ArrayView1<T>) -> Result<Array1<T>> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax of an empty bag"));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::Numeric("non-finite attention score".into()));
    }
    let max = scores.fold(T::neg_infinity(), |m, &v| m.max(v));
    let exp = scores.mapv(|v| (v - max).exp());
    let total = exp.sum();
    Ok(exp / total)
}

/// Pre-softmax scores `wᵀ tanh(V h_k)` for every row of `H`.
pub fn attention_scores<T: Scalar>(h: ArrayView2<T>, params: &AttentionParams<T>) -> Result<Array1<T>> {
    if h.ncols() != params.v.ncols() {
        return Err(Error::invalid(format!(
            "features have width {} but V expects {}",
            h.ncols(),
            params.v.ncols()
        )));
    }
    Ok(h.dot(&params.v.t()).mapv(T::tanh).dot(&params.w))
}

pub fn attention_weights<T: Scalar>(h: &FeatureSet<T>, params: &AttentionParams<T>) -> Result<Array1<T>> {
    softmax(attention_scores(h.h.view(), params)?.view())
}

/// `z = Σ_k a_k h_k`.
pub fn pool_embedding<T: Scalar>(h: &FeatureSet<T>, weights: ArrayView1<T>) -> Result<Array1<T>> {
    if weights.len() != h.bag_size() {
        return Err(Error::invalid(format!(
            "{} attention weights for a bag of {}",
            weights.len(),
            h.bag_size()
        )));
    }
    Ok(h.h.t().dot(&weights))
}

pub fn classify<T: Scalar>(z: ArrayView1<T>, head: &HeadParams<T>) -> Result<(T, T)> {
    if z.len() != head.weight.len() {
        return Err(Error::invalid("embedding width does not match classifier"));
    }
    let logit = z.dot(&head.weight) + head.bias;
    Ok((logit, sigmoid(logit)))
}

/// Binary cross-entropy with the probability clamped to
/// `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub fn binary_cross_entropy<T: Scalar>(probability: T, label: bool) -> T {
    let eps = cast::<T>(PROB_CLAMP);
    let p = probability.max(eps).min(T::one() - eps);
    if label {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// Result of a forward/backward pass over one bag.
pub struct BagGradient<T> {
    pub loss: T,
    pub probability: T,
    pub grads: Grads<T>,
}

#[derive(Clone, Debug)]
pub struct MilModel<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    backbone: Backbone,
    projection: Linear,
    attention_v: Linear,
    attention_w: Linear,
    classifier: Linear,
}

impl<T: Scalar> MilModel<T> {
    /// Randomly initialized model; backbone weights for the pretrained kind
    /// are loaded separately (see [`checkpoint::load_pretrained_backbone`]).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::build(&config.backbone, &mut params, &mut rng);
        let feat = config.backbone.output_dim();
        let (m, l) = (config.embed_dim, config.attention_dim);
        let projection = Linear::new(
            &mut params,
            &mut rng,
            "projection",
            ParamGroup::Head,
            feat,
            m,
            true,
            (6.0 / feat as f64).sqrt(),
        );
        let xavier = (6.0 / (m + l) as f64).sqrt();
        let attention_v = Linear::new(&mut params, &mut rng, "attention.v", ParamGroup::Head, m, l, false, xavier);
        let attention_w = Linear::new(
            &mut params,
            &mut rng,
            "attention.w",
            ParamGroup::Head,
            l,
            1,
            false,
            (6.0 / (l + 1) as f64).sqrt(),
        );
        let classifier = Linear::new(
            &mut params,
            &mut rng,
            "classifier",
            ParamGroup::Head,
            m,
            1,
            true,
            1.0 / (m as f64).sqrt(),
        );
        Ok(Self {
            config,
            params,
            backbone,
            projection,
            attention_v,
            attention_w,
            classifier,
        })
    }

    /// Rebuilds a model around stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, stored: &ParamSet<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.load_tensors(stored.iter().map(|(e, t)| (e.name.as_str(), t.clone())), true)?;
        Ok(model)
    }

    /// Overwrites tensors by name. With `require_all`, every model tensor
    /// must be supplied.
    pub fn load_tensors<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = (&'a str, ndarray::ArrayD<T>)>,
        require_all: bool,
    ) -> Result<usize> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in tensors {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::invalid(format!("unexpected tensor {name}")))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = t;
            seen[id.index()] = true;
        }
        if require_all {
            let missing: Vec<_> = self
                .params
                .ids()
                .filter(|id| !seen[id.index()])
                .map(|id| self.params.entry(id).name.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::invalid(format!("missing tensors: {}", missing.join(", "))));
            }
        }
        Ok(seen.iter().filter(|&&s| s).count())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn attention_params(&self) -> AttentionParams<T> {
        let v = self.attention_v.weight_matrix(&self.params).to_owned();
        let w = self.attention_w.weight_matrix(&self.params).row(0).to_owned();
        AttentionParams { v, w }
    }

    pub fn head_params(&self) -> HeadParams<T> {
        let weight = self.classifier.weight_matrix(&self.params).row(0).to_owned();
        let bias = self.params.get(self.classifier.bias.expect("classifier has bias"))[[0]];
        HeadParams { weight, bias }
    }

    /// Stacks patches into the `[3, N, d, d]` backbone layout, normalizing
    /// with ImageNet statistics for the pretrained backbone.
    pub fn prepare_input(&self, patches: &[ndarray::Array3<f32>]) -> Result<Array4<T>> {
        let d = self.config.patch_size;
        let mut x = Array4::<T>::zeros((3, patches.len(), d, d));
        let imagenet = self.config.backbone.uses_imagenet_normalization();
        for (n, p) in patches.iter().enumerate() {
            if p.dim() != (d, d, 3) {
                return Err(Error::invalid(format!("patch is {:?}, expected ({d}, {d}, 3)", p.dim())));
            }
            for c in 0..3 {
                let (mean, std) = if imagenet {
                    (IMAGENET_MEAN[c], IMAGENET_STD[c])
                } else {
                    (0.0, 1.0)
                };
                let mut plane = x.slice_mut(s![c, n, .., ..]);
                plane.zip_mut_with(&p.slice(s![.., .., c]), |dst, &v| *dst = cast((f64::from(v) - f64::from(mean)) / f64::from(std)));
            }
        }
        Ok(x)
    }

    fn embed(&self, backbone_features: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let pre = self.projection.forward(&self.params, &backbone_features.view());
        let h = pre.mapv(|v| v.max(T::zero()));
        (pre, h)
    }

    /// Backbone plus projection for every patch of the bag.
    pub fn extract_features(&self, bag: &PatchBag) -> Result<FeatureSet<T>> {
        if bag.is_empty() {
            return Err(Error::invalid("empty bag"));
        }
        let chunks: Vec<Array2<T>> = bag
            .patches
            .par_chunks(FEATURE_CHUNK)
            .map(|chunk| {
                let x = self.prepare_input(chunk)?;
                let f = self.backbone.forward(&self.params, &x);
                Ok(self.embed(&f).1)
            })
            .collect::<Result<_>>()?;
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        FeatureSet::new(ndarray::concatenate(Axis(0), &views).expect("chunks share width"))
    }

    pub fn forward_features(&self, h: &FeatureSet<T>) -> Result<AttentionOutput<T>> {
        let weights = attention_weights(h, &self.attention_params())?;
        let z = pool_embedding(h, weights.view())?;
        let (logit, probability) = classify(z.view(), &self.head_params())?;
        if !probability.is_finite() {
            return Err(Error::Numeric("non-finite probability".into()));
        }
        Ok(AttentionOutput {
            weights,
            z,
            logit,
            probability,
        })
    }

    pub fn forward(&self, bag: &PatchBag) -> Result<AttentionOutput<T>> {
        self.forward_features(&self.extract_features(bag)?)
    }

    pub fn bag_loss(&self, bag: &PatchBag, label: bool) -> Result<T> {
        Ok(binary_cross_entropy(self.forward(bag)?.probability, label))
    }

    /// Loss and gradients for one bag. `loss_scale` multiplies the gradient
    /// (e.g. `1 / batch_size` for a batch mean). The backbone is only
    /// differentiated when `train_backbone` is set.
    pub fn loss_and_grads(&self, bag: &PatchBag, label: bool, loss_scale: T, train_backbone: bool) -> Result<BagGradient<T>> {
        let x = self.prepare_input(&bag.patches)?;
        if bag.is_empty() {
            return Err(Error::invalid("empty bag"));
        }
        let params = &self.params;
        let (feat, cache) = if train_backbone {
            let (f, c) = self.backbone.forward_train(params, &x);
            (f, Some(c))
        } else {
            (self.backbone.forward(params, &x), None)
        };
        let (pre, h) = self.embed(&feat);

        let u = self.attention_v.forward(params, &h.view());
        let t = u.mapv(T::tanh);
        let scores = self.attention_w.forward(params, &t.view()).column(0).to_owned();
        let a = softmax(scores.view())?;
        let z = h.t().dot(&a);
        let z_row = z.view().insert_axis(Axis(0));
        let logit = self.classifier.forward(params, &z_row)[[0, 0]];
        let p = sigmoid(logit);
        let loss = binary_cross_entropy(p, label);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss for bag {}", bag.source_image_id)));
        }

        let y = if label { T::one() } else { T::zero() };
        let eps = cast::<T>(PROB_CLAMP);
        let clamped = p < eps || p > T::one() - eps;
        let dlogit = if clamped { T::zero() } else { (p - y) * loss_scale };

        let mut grads = Grads::for_params(params);
        let dz_row = self
            .classifier
            .backward(params, &z_row, &Array2::from_elem((1, 1), dlogit), &mut grads);
        let dz = dz_row.row(0);

        // Through z = Σ a_k h_k.
        let mut dh = Array2::<T>::zeros(h.raw_dim());
        for (k, mut row) in dh.outer_iter_mut().enumerate() {
            row.assign(&dz.mapv(|v| v * a[k]));
        }
        let da = h.dot(&dz);
        // Softmax Jacobian: ds_k = a_k (da_k − Σ_j a_j da_j).
        let mean_da = a.dot(&da);
        let ds = Array2::from_shape_fn((a.len(), 1), |(k, _)| a[k] * (da[k] - mean_da));
        let dt = self.attention_w.backward(params, &t.view(), &ds, &mut grads);
        let du = dt * &t.mapv(|v| T::one() - v * v);
        dh += &self.attention_v.backward(params, &h.view(), &du, &mut grads);

        let mut dpre = dh;
        dpre.zip_mut_with(&pre, |g, &v| {
            if v <= T::zero() {
                *g = T::zero();
            }
        });
        let dfeat = self.projection.backward(params, &feat.view(), &dpre, &mut grads);
        if let Some(cache) = cache {
            self.backbone.backward(params, &cache, &dfeat, &mut grads);
        }
        Ok(BagGradient {
            loss,
            probability: p,
            grads,
        })
    }

    pub fn cast<U: Scalar>(&self) -> MilModel<U> {
        MilModel {
            config: self.config.clone(),
            params: self.params.map_scalar(),
            backbone: self.backbone.clone(),
            projection: self.projection.clone(),
            attention_v: self.attention_v.clone(),
            attention_w: self.attention_w.clone(),
            classifier: self.classifier.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchbag::Origin;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array3};
    use rand::Rng;

    fn small_config(patch: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneKind::SmallCnn { widths: [4, 6, 8] },
            patch_size: patch,
            embed_dim: 8,
            attention_dim: 5,
        }
    }

    fn random_bag(k: usize, d: usize, seed: u64) -> PatchBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchBag {
            patches: (0..k)
                .map(|_| Array3::from_shape_simple_fn((d, d, 3), || rng.gen_range(0.0..1.0)))
                .collect(),
            origins: (0..k).map(|i| Origin { row: i, col: 0 }).collect(),
            source_image_id: "bag".into(),
            patch_size: d,
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(arr1(&[3.7f64]).view()).unwrap(), arr1(&[1.0]));
        let a = softmax(arr1(&[0.0f64, 3f64.ln()]).view()).unwrap();
        assert_abs_diff_eq!(a[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 0.75, epsilon = 1e-12);
        assert!(softmax(arr1(&[0.0f64, f64::NAN]).view()).is_err());
        assert!(softmax(Array1::<f64>::zeros(0).view()).is_err());
    }

    #[test]
    fn attention_weights_from_scores() {
        // M = L = 1, V = [1], w = [2]; s = 2 tanh(h). Choose h so s = (0, ln 3).
        let params = AttentionParams::new(arr2(&[[1.0f64]]), arr1(&[2.0])).unwrap();
        let h2 = (3f64.ln() / 2.0).atanh();
        let h = FeatureSet::new(arr2(&[[0.0], [h2]])).unwrap();
        let a = attention_weights(&h, &params).unwrap();
        assert_abs_diff_eq!(a[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 0.75, epsilon = 1e-12);

        let equal = FeatureSet::new(Array2::from_elem((4, 1), 0.3f64)).unwrap();
        for v in attention_weights(&equal, &params).unwrap() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
        assert!(AttentionParams::new(arr2(&[[1.0f64, 0.0]]), arr1(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn pooling_examples() {
        let h = FeatureSet::new(arr2(&[[1.0f64, 0.0], [0.0, 1.0]])).unwrap();
        let z = pool_embedding(&h, arr1(&[0.25, 0.75]).view()).unwrap();
        assert_eq!(z, arr1(&[0.25, 0.75]));
        assert!(pool_embedding(&h, arr1(&[1.0]).view()).is_err());
        let single = FeatureSet::new(arr2(&[[0.4f64, -2.0]])).unwrap();
        assert_eq!(pool_embedding(&single, arr1(&[1.0]).view()).unwrap(), arr1(&[0.4, -2.0]));
    }

    #[test]
    fn classify_examples() {
        let zero = HeadParams {
            weight: arr1(&[0.0f64, 0.0]),
            bias: 0.0,
        };
        assert_eq!(classify(arr1(&[4.0, 5.0]).view(), &zero).unwrap().1, 0.5);
        let head = HeadParams {
            weight: arr1(&[1.0f64, 0.0]),
            bias: 0.0,
        };
        let (_, p) = classify(arr1(&[3f64.ln(), 5.0]).view(), &head).unwrap();
        assert_abs_diff_eq!(p, 0.75, epsilon = 1e-12);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn bce_examples() {
        assert!(binary_cross_entropy(1.0f64, true) <= 1e-6);
        assert!(binary_cross_entropy(0.0f64, false) <= 1e-6);
        assert_abs_diff_eq!(binary_cross_entropy(0.5f64, true), 2f64.ln(), epsilon = 1e-12);
        assert!(binary_cross_entropy(0.0f64, true).is_finite());
    }

    #[test]
    fn default_embedding_width_is_128() {
        let cfg = ModelConfig {
            backbone: BackboneKind::small_cnn(),
            patch_size: 16,
            ..ModelConfig::default()
        };
        let model = MilModel::<f32>::new(cfg, 0).unwrap();
        let h = model.extract_features(&random_bag(3, 16, 1)).unwrap();
        assert_eq!((h.bag_size(), h.embed_dim()), (3, 128));
    }

    #[test]
    fn identical_patches_give_identical_features() {
        let model = MilModel::<f64>::new(small_config(8), 3).unwrap();
        let one = random_bag(1, 8, 4);
        let bag = PatchBag {
            patches: vec![one.patches[0].clone(); 5],
            origins: vec![one.origins[0]; 5],
            ..one.clone()
        };
        let h = model.extract_features(&bag).unwrap();
        for r in 1..5 {
            assert_eq!(h.h.row(r), h.h.row(0));
        }
        let single = model.extract_features(&one).unwrap();
        assert_eq!(single.bag_size(), 1);
        let out = model.forward(&one).unwrap();
        let (_, p) = classify(single.h.row(0), &model.head_params()).unwrap();
        assert_abs_diff_eq!(out.probability, p, epsilon = 1e-12);
        assert_eq!(out.weights, arr1(&[1.0]));
    }

    #[test]
    fn wrong_patch_shape_is_rejected() {
        let model = MilModel::<f32>::new(small_config(8), 0).unwrap();
        assert!(model.forward(&random_bag(2, 9, 0)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = MilModel::<f64>::new(small_config(8), 21).unwrap();
        let bag = random_bag(3, 8, 22);
        let g = model.loss_and_grads(&bag, true, 1.0, true).unwrap();
        assert_abs_diff_eq!(g.loss, model.bag_loss(&bag, true).unwrap(), epsilon = 1e-12);
        let eps = 1e-6;
        for id in model.params().ids() {
            let grad = g.grads.get(id).unwrap();
            for i in 0..grad.len() {
                let mut m = model.clone();
                m.params_mut().get_mut(id).as_slice_mut().unwrap()[i] += eps;
                let up = m.bag_loss(&bag, true).unwrap();
                m.params_mut().get_mut(id).as_slice_mut().unwrap()[i] -= 2.0 * eps;
                let down = m.bag_loss(&bag, true).unwrap();
                let fd = (up - down) / (2.0 * eps);
                let an = grad.as_slice().unwrap()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{} [{i}]: {an} vs {fd}", model.params().entry(id).name);
            }
        }
    }

    #[test]
    fn frozen_backward_leaves_backbone_untouched() {
        let model = MilModel::<f32>::new(small_config(8), 2).unwrap();
        let g = model.loss_and_grads(&random_bag(4, 8, 3), false, 1.0, false).unwrap();
        for id in model.params().ids() {
            let has = g.grads.get(id).is_some();
            assert_eq!(has, model.params().entry(id).group == ParamGroup::Head);
        }
    }
}
