//! Procedural shapes-on-texture corpus with exact masks.
//!
//! Each image has a textured background and up to three shapes. Shapes of
//! class [`TARGET_CLASS`] are orange-red with diagonal stripes; the two
//! distractor classes are green (speckled) and violet (dotted). The target is
//! always rendered last so its mask area is never occluded.

use std::f32::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{binarize_label, scaled_pixel_threshold, ImageRecord, MetaClassMap, Split};
use crate::error::{Error, Result};

pub const TARGET_CLASS: u8 = 1;
pub const DISTRACTOR_CLASSES: [u8; 2] = [2, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_images: usize,
    pub image_size: usize,
    /// Defaults to the standard threshold scaled to `image_size²`.
    pub pixel_threshold: Option<usize>,
    pub positive_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_images: 200,
            image_size: 128,
            pixel_threshold: None,
            positive_fraction: 0.5,
            test_fraction: 0.25,
        }
    }
}

impl SyntheticConfig {
    pub fn threshold(&self) -> usize {
        self.pixel_threshold
            .unwrap_or_else(|| scaled_pixel_threshold(self.image_size))
    }
}

pub fn synthetic_meta_class() -> MetaClassMap {
    MetaClassMap::new("synthetic-target", [TARGET_CLASS]).expect("valid meta-class")
}

pub fn generate_synthetic(seed: u64, n_images: usize, image_size: usize) -> Result<Vec<ImageRecord>> {
    generate(&SyntheticConfig {
        seed,
        n_images,
        image_size,
        ..SyntheticConfig::default()
    })
}

pub fn generate(config: &SyntheticConfig) -> Result<Vec<ImageRecord>> {
    if config.n_images < 2 {
        return Err(Error::invalid("synthetic dataset needs at least 2 images"));
    }
    let size = config.image_size;
    let threshold = config.threshold();
    if size < 16 || threshold * 2 > size * size {
        return Err(Error::invalid(format!(
            "image size {size} too small for a {threshold}-pixel target"
        )));
    }
    if !(0.0..=1.0).contains(&config.positive_fraction) || !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::invalid("fractions must lie in [0, 1]"));
    }
    let map = synthetic_meta_class();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let positive = rng.gen_bool(config.positive_fraction);
        let (pixels, mask) = render(&mut rng, size, threshold, positive);
        let (label, count) = binarize_label(&mask, &map, threshold);
        debug_assert_eq!(label.is_positive(), positive);
        let split = if ((i + 1) as f64 * config.test_fraction).floor() > (i as f64 * config.test_fraction).floor() {
            Split::Test
        } else {
            Split::Train
        };
        records.push(ImageRecord {
            image_id: format!("synth{:04}_{i:05}", config.seed % 10_000),
            pixels,
            mask: Some(mask),
            label,
            positive_pixel_count: count,
            split,
        });
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Triangle { pts: [(f32, f32); 3] },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, size: usize, radius: f32) -> Self {
        let margin = radius + 1.0;
        let hi = (size as f32 - margin).max(margin + 1.0);
        let cy = rng.gen_range(margin..hi);
        let cx = rng.gen_range(margin..hi);
        match rng.gen_range(0..3) {
            0 => {
                let aspect = rng.gen_range(0.75f32..1.0);
                Shape::Ellipse {
                    cy,
                    cx,
                    ry: radius * aspect,
                    rx: radius,
                }
            }
            1 => {
                let half = radius * 0.85;
                Shape::Rect {
                    y0: cy - half,
                    x0: cx - half * 0.9,
                    y1: cy + half,
                    x1: cx + half * 0.9,
                }
            }
            _ => {
                let rot = rng.gen_range(0.0..2.0 * PI);
                let pts = [0.0f32, 1.0, 2.0].map(|k| {
                    let a = rot + k * 2.0 * PI / 3.0;
                    (cy + radius * a.sin(), cx + radius * a.cos())
                });
                Shape::Triangle { pts }
            }
        }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Triangle { pts } => {
                let edge = |(ay, ax): (f32, f32), (by, bx): (f32, f32)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let e0 = edge(pts[0], pts[1]);
                let e1 = edge(pts[1], pts[2]);
                let e2 = edge(pts[2], pts[0]);
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }

    fn area(&self, size: usize) -> usize {
        let mut n = 0;
        for i in 0..size {
            for j in 0..size {
                if self.contains(i as f32 + 0.5, j as f32 + 0.5) {
                    n += 1;
                }
            }
        }
        n
    }
}

fn shade(class: u8, base: [f32; 3], i: usize, j: usize, noise: f32) -> [f32; 3] {
    let m = match class {
        TARGET_CLASS => {
            if ((i + j) / 3) % 2 == 0 {
                1.12
            } else {
                0.82
            }
        }
        2 => 1.0 + noise * 2.0,
        _ => {
            if i % 6 < 2 && j % 6 < 2 {
                1.25
            } else {
                0.95
            }
        }
    };
    base.map(|c| (c * m + noise).clamp(0.0, 1.0))
}

fn class_color<R: Rng>(rng: &mut R, class: u8) -> [f32; 3] {
    let mut jitter = |c: f32, s: f32| (c + rng.gen_range(-s..s)).clamp(0.0, 1.0);
    match class {
        TARGET_CLASS => [jitter(0.85, 0.07), jitter(0.32, 0.07), jitter(0.15, 0.05)],
        2 => [jitter(0.28, 0.07), jitter(0.66, 0.08), jitter(0.30, 0.07)],
        _ => [jitter(0.55, 0.07), jitter(0.32, 0.06), jitter(0.72, 0.07)],
    }
}

fn render<R: Rng>(rng: &mut R, size: usize, threshold: usize, positive: bool) -> (Array3<f32>, Array2<u8>) {
    let base = [rng.gen_range(0.45..0.75f32), rng.gen_range(0.4..0.65), rng.gen_range(0.3..0.55)];
    let freq = (rng.gen_range(0.01..0.05f32), rng.gen_range(0.01..0.05f32));
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut pixels = Array3::<f32>::zeros((size, size, 3));
    for i in 0..size {
        for j in 0..size {
            let wave = 0.08 * (2.0 * PI * (i as f32 * freq.0 + j as f32 * freq.1) + phase).sin();
            let noise = rng.gen_range(-0.04..0.04f32);
            for c in 0..3 {
                pixels[[i, j, c]] = (base[c] + wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    let mut mask = Array2::<u8>::zeros((size, size));

    let min_area = threshold as f32 * 1.6;
    let max_area = (threshold as f32 * 4.0).min((size * size) as f32 * 0.3);
    let radius_for = |area: f32| (area / PI).sqrt();
    let n_distractors = if positive { rng.gen_range(0..=2) } else { rng.gen_range(0..=3) };
    let mut shapes: Vec<(u8, Shape)> = Vec::new();
    for _ in 0..n_distractors {
        let class = DISTRACTOR_CLASSES[rng.gen_range(0..DISTRACTOR_CLASSES.len())];
        let r = radius_for(rng.gen_range(min_area..max_area.max(min_area + 1.0)));
        shapes.push((class, Shape::random(rng, size, r)));
    }
    if positive {
        let mut r = radius_for(rng.gen_range(min_area..max_area.max(min_area + 1.0)));
        let mut shape = Shape::random(rng, size, r);
        // Triangles and squashed ellipses cover less than πr²; grow until the
        // target clears the threshold with margin.
        while shape.area(size) < threshold + threshold / 10 {
            r *= 1.1;
            shape = Shape::random(rng, size, r.min(size as f32 * 0.45));
        }
        shapes.push((TARGET_CLASS, shape));
    }

    for (class, shape) in shapes {
        let color = class_color(rng, class);
        for i in 0..size {
            for j in 0..size {
                if shape.contains(i as f32 + 0.5, j as f32 + 0.5) {
                    let noise = rng.gen_range(-0.03..0.03f32);
                    let px = shade(class, color, i, j, noise);
                    for c in 0..3 {
                        pixels[[i, j, c]] = px[c];
                    }
                    mask[[i, j]] = class;
                }
            }
        }
    }
    // Quantize so in-memory records equal their 8-bit on-disk form.
    pixels.mapv_inplace(|v| (v * 255.0).round() / 255.0);
    (pixels, mask)
}
