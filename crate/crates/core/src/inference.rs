//! Test-time classification, attention heatmaps and threshold segmentation.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Label};
use crate::error::{Error, Result};
use crate::model::nn::Scalar;
use crate::model::{AttentionOutput, MilModel};
use crate::patchbag::{dense_bag, GridSpec, Origin};

pub const DEFAULT_CLASSIFICATION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SEGMENTATION_THRESHOLD: f64 = 0.3;
pub const DEFAULT_TEST_OVERLAP: f64 = 0.875;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub probability: f64,
    pub label: Label,
    pub threshold: f64,
}

impl Prediction {
    /// Positive iff `probability >= threshold`.
    pub fn new(image_id: impl Into<String>, probability: f64, threshold: f64) -> Self {
        Self {
            image_id: image_id.into(),
            probability,
            label: Label::from_bool(probability >= threshold),
            threshold,
        }
    }
}

/// Classification plus the per-patch attention that produced it.
#[derive(Clone, Debug)]
pub struct DenseResult {
    pub prediction: Prediction,
    pub attention: AttentionOutput<f32>,
    pub origins: Vec<Origin>,
}

/// Runs the model on the dense grid of `image`.
pub fn predict<T: Scalar>(
    image: &ImageRecord,
    model: &MilModel<T>,
    spec: &GridSpec,
    threshold: f64,
) -> Result<DenseResult> {
    let bag = dense_bag(image, spec)?;
    let out = model.forward(&bag)?;
    let attention = AttentionOutput {
        weights: out.weights.mapv(|v| v.to_f32().unwrap()),
        z: out.z.mapv(|v| v.to_f32().unwrap()),
        logit: out.logit.to_f32().unwrap(),
        probability: out.probability.to_f32().unwrap(),
    };
    Ok(DenseResult {
        prediction: Prediction::new(&image.image_id, out.probability.to_f64().unwrap(), threshold),
        attention,
        origins: bag.origins,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `D × D`, in `[0, 1]`.
    pub values: Array2<f64>,
    /// Number of patches covering each pixel.
    pub coverage: Array2<u32>,
    pub segmentation: Option<Array2<bool>>,
    pub seg_threshold: Option<f64>,
}

impl Heatmap {
    pub fn with_segmentation(mut self, a: f64) -> Result<Self> {
        self.segmentation = Some(segment(&self, a)?);
        self.seg_threshold = Some(a);
        Ok(self)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Spreads each patch weight over its footprint, averages by coverage and
/// rescales so the maximum is 1. Uncovered pixels stay 0.
pub fn accumulate_heatmap<W: Copy + Into<f64>>(weights: &[W], origins: &[Origin], spec: &GridSpec) -> Result<Heatmap> {
    if weights.is_empty() {
        return Err(Error::invalid("cannot build a heatmap from an empty bag"));
    }
    if weights.len() != origins.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} patches",
            weights.len(),
            origins.len()
        )));
    }
    let (size, d) = (spec.image_size, spec.patch_size);
    let mut sum = Array2::<f64>::zeros((size, size));
    let mut coverage = Array2::<u32>::zeros((size, size));
    for (&w, o) in weights.iter().zip(origins) {
        let w: f64 = w.into();
        if !w.is_finite() || w < 0.0 {
            return Err(Error::invalid(format!("attention weight {w} is not a non-negative number")));
        }
        if o.row + d > size || o.col + d > size {
            return Err(Error::invalid(format!("patch at ({}, {}) leaves the image", o.row, o.col)));
        }
        sum.slice_mut(s![o.row..o.row + d, o.col..o.col + d]).mapv_inplace(|v| v + w);
        coverage.slice_mut(s![o.row..o.row + d, o.col..o.col + d]).mapv_inplace(|c| c + 1);
    }
    ndarray::Zip::from(&mut sum).and(&coverage).for_each(|v, &c| {
        if c > 0 {
            *v /= c as f64;
        }
    });
    let max = sum.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        sum.mapv_inplace(|v| v / max);
    }
    Ok(Heatmap {
        values: sum,
        coverage,
        segmentation: None,
        seg_threshold: None,
    })
}

/// Covered pixels whose value is at least `a`.
pub fn segment(heatmap: &Heatmap, a: f64) -> Result<Array2<bool>> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::invalid(format!("segmentation threshold {a} outside [0, 1]")));
    }
    let mut mask = Array2::from_elem(heatmap.values.raw_dim(), false);
    ndarray::Zip::from(&mut mask)
        .and(&heatmap.values)
        .and(&heatmap.coverage)
        .for_each(|m, &v, &c| *m = c > 0 && v >= a);
    Ok(mask)
}

/// Prediction plus heatmap for one image; the heatmap is built from the
/// same forward pass.
pub fn predict_with_heatmap<T: Scalar>(
    image: &ImageRecord,
    model: &MilModel<T>,
    spec: &GridSpec,
    threshold: f64,
    a: f64,
) -> Result<(Prediction, Heatmap)> {
    let r = predict(image, model, spec, threshold)?;
    let weights = r.attention.weights.to_vec();
    let heat = accumulate_heatmap(&weights, &r.origins, spec)?.with_segmentation(a)?;
    Ok((r.prediction, heat))
}

/// Which images get a heatmap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapPolicy {
    /// Predicted positive or labelled positive.
    #[default]
    PredictedOrLabeled,
    All,
    None,
}

impl HeatmapPolicy {
    pub fn wants(self, prediction: &Prediction, truth: Label) -> bool {
        match self {
            HeatmapPolicy::PredictedOrLabeled => prediction.label.is_positive() || truth.is_positive(),
            HeatmapPolicy::All => true,
            HeatmapPolicy::None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub image_id: String,
    pub probability: f64,
    pub label: Label,
    pub classification_threshold: f64,
    pub seg_threshold: Option<f64>,
    pub grid: GridSpec,
    pub bag_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputPaths {
    pub heatmap: PathBuf,
    pub segmentation: Option<PathBuf>,
    pub meta: PathBuf,
}

pub fn output_paths(dir: &Path, image_id: &str) -> OutputPaths {
    OutputPaths {
        heatmap: dir.join(format!("{image_id}.heat.png")),
        segmentation: Some(dir.join(format!("{image_id}.seg.png"))),
        meta: dir.join(format!("{image_id}.meta.json")),
    }
}

/// Heatmap value to 16-bit sample.
pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(data).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

pub fn save_heatmap_png(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    let data: Vec<u8> = values.iter().flat_map(|&v| quantize(v).to_be_bytes()).collect();
    write_png(path, w, h, png::BitDepth::Sixteen, &data)
}

pub fn save_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let row_bytes = w.div_ceil(8);
    let mut data = vec![0u8; row_bytes * h];
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            data[r * row_bytes + c / 8] |= 0x80 >> (c % 8);
        }
    }
    write_png(path, w, h, png::BitDepth::One, &data)
}

fn read_gray_png(path: &Path) -> Result<(png::BitDepth, usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, "expected a grayscale image"));
    }
    let (depth, w, h) = (info.bit_depth, info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    buf.truncate(frame.buffer_size());
    Ok((depth, w, h, buf))
}

pub fn load_heatmap_png(path: &Path) -> Result<Array2<f64>> {
    let (depth, w, h, buf) = read_gray_png(path)?;
    if depth != png::BitDepth::Sixteen {
        return Err(Error::format(path, "expected 16-bit samples"));
    }
    let values = buf
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|e| Error::format(path, e))
}

pub fn load_mask_png(path: &Path) -> Result<Array2<bool>> {
    let (depth, w, h, buf) = read_gray_png(path)?;
    if depth != png::BitDepth::One {
        return Err(Error::format(path, "expected 1-bit samples"));
    }
    let row_bytes = w.div_ceil(8);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| buf[r * row_bytes + c / 8] & (0x80 >> (c % 8)) != 0))
}

/// Writes `<id>.heat.png`, `<id>.seg.png` (when segmented) and
/// `<id>.meta.json` into `dir`.
pub fn export_outputs(
    dir: &Path,
    prediction: &Prediction,
    heatmap: &Heatmap,
    spec: &GridSpec,
    bag_size: usize,
) -> Result<OutputPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = output_paths(dir, &prediction.image_id);
    save_heatmap_png(&paths.heatmap, &heatmap.values)?;
    match &heatmap.segmentation {
        Some(mask) => save_mask_png(paths.segmentation.as_ref().unwrap(), mask)?,
        None => paths.segmentation = None,
    }
    let meta = OutputMeta {
        image_id: prediction.image_id.clone(),
        probability: prediction.probability,
        label: prediction.label,
        classification_threshold: prediction.threshold,
        seg_threshold: heatmap.seg_threshold,
        grid: *spec,
        bag_size,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&paths.meta, json + "\n").map_err(|e| Error::io(&paths.meta, e))?;
    Ok(paths)
}

pub fn load_meta(path: &Path) -> Result<OutputMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}
