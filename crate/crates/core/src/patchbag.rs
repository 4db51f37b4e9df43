//! Patch grid geometry and bag construction.

use ndarray::{s, Array3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};

/// Slack for ceilings of quantities that are integral in exact arithmetic
/// but land a few ulps above an integer in floating point.
const CEIL_SLACK: f64 = 1e-9;

fn ceil_tolerant(x: f64) -> f64 {
    (x - CEIL_SLACK * x.abs().max(1.0)).ceil()
}

/// Square patch grid over a square image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub overlap: f64,
}

impl GridSpec {
    pub fn new(image_size: usize, patch_size: usize, overlap: f64) -> Result<Self> {
        let spec = Self {
            image_size,
            patch_size,
            overlap,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if self.patch_size > self.image_size {
            return Err(Error::invalid(format!(
                "patch size {} exceeds image size {}",
                self.patch_size, self.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::invalid(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        Ok(())
    }

    /// Nominal stride `d · (1 − overlap)`.
    pub fn stride(&self) -> f64 {
        self.patch_size as f64 * (1.0 - self.overlap)
    }

    /// Per-axis patch count `ceil(1 + (D − d) / stride)`.
    pub fn axis_count(&self) -> Result<usize> {
        self.validate()?;
        let span = (self.image_size - self.patch_size) as f64;
        Ok(ceil_tolerant(1.0 + span / self.stride()) as usize)
    }

    /// Whether the stride is an integer dividing `D − d`, in which case the
    /// grid is exactly regular.
    pub fn stride_divides_span(&self) -> bool {
        let s = self.stride();
        let si = s.round();
        if si < 1.0 || (s - si).abs() > CEIL_SLACK * s.max(1.0) {
            return false;
        }
        (self.image_size - self.patch_size) % si as usize == 0
    }
}

/// Top-left pixel of a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Origin {
    pub row: usize,
    pub col: usize,
}

/// Evenly spaced positions from 0 to `D − d` inclusive.
pub fn axis_positions(spec: &GridSpec) -> Result<Vec<usize>> {
    let n = spec.axis_count()?;
    let span = spec.image_size - spec.patch_size;
    if n == 1 {
        return Ok(vec![0]);
    }
    let step = span as f64 / (n - 1) as f64;
    Ok((0..n).map(|i| ((i as f64 * step).round() as usize).min(span)).collect())
}

/// All grid origins in row-major order.
pub fn enumerate_grid(spec: &GridSpec) -> Result<Vec<Origin>> {
    let pos = axis_positions(spec)?;
    Ok(pos
        .iter()
        .flat_map(|&row| pos.iter().map(move |&col| Origin { row, col }))
        .collect())
}

/// Closed-form dense patch count `ceil((1 + (D − d) / (d (1 − t)))²)`.
pub fn count_patches(spec: &GridSpec) -> Result<usize> {
    spec.validate()?;
    let per_axis = 1.0 + (spec.image_size - spec.patch_size) as f64 / spec.stride();
    Ok(ceil_tolerant(per_axis * per_axis) as usize)
}

/// A multiple-instance bag: K patches and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    /// Each `d × d × 3`.
    pub patches: Vec<Array3<f32>>,
    pub origins: Vec<Origin>,
    pub source_image_id: String,
    pub patch_size: usize,
}

impl PatchBag {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Reorders patches and origins together: position `i` takes entry `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> PatchBag {
        PatchBag {
            patches: order.iter().map(|&i| self.patches[i].clone()).collect(),
            origins: order.iter().map(|&i| self.origins[i]).collect(),
            source_image_id: self.source_image_id.clone(),
            patch_size: self.patch_size,
        }
    }
}

pub fn crop(pixels: &Array3<f32>, origin: Origin, patch_size: usize) -> Array3<f32> {
    pixels
        .slice(s![
            origin.row..origin.row + patch_size,
            origin.col..origin.col + patch_size,
            ..
        ])
        .to_owned()
}

fn check_image(image: &ImageRecord, spec: &GridSpec) -> Result<()> {
    let (h, w, c) = image.pixels.dim();
    if h != spec.image_size || w != spec.image_size || c != 3 {
        return Err(Error::invalid(format!(
            "{}: image is {h}×{w}×{c}, grid expects {}×{}×3",
            image.image_id, spec.image_size, spec.image_size
        )));
    }
    Ok(())
}

fn build_bag(image: &ImageRecord, spec: &GridSpec, origins: Vec<Origin>) -> PatchBag {
    PatchBag {
        patches: origins.iter().map(|&o| crop(&image.pixels, o, spec.patch_size)).collect(),
        origins,
        source_image_id: image.image_id.clone(),
        patch_size: spec.patch_size,
    }
}

/// Origins for a random training bag: `k` distinct grid cells, or `k` draws
/// with replacement when the grid has fewer than `k` cells.
pub fn sample_origins(spec: &GridSpec, k: usize, seed: u64) -> Result<Vec<Origin>> {
    if k == 0 {
        return Err(Error::invalid("bag size must be at least 1"));
    }
    let grid = enumerate_grid(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(if k <= grid.len() {
        index::sample(&mut rng, grid.len(), k)
            .into_iter()
            .map(|i| grid[i])
            .collect()
    } else {
        (0..k).map(|_| grid[rng.gen_range(0..grid.len())]).collect()
    })
}

pub fn sample_bag(image: &ImageRecord, spec: &GridSpec, k: usize, seed: u64) -> Result<PatchBag> {
    check_image(image, spec)?;
    let origins = sample_origins(spec, k, seed)?;
    Ok(build_bag(image, spec, origins))
}

/// Every grid patch, row-major.
pub fn dense_bag(image: &ImageRecord, spec: &GridSpec) -> Result<PatchBag> {
    check_image(image, spec)?;
    Ok(build_bag(image, spec, enumerate_grid(spec)?))
}
