//! Image-level classification metrics and pixel-level localization metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::inference::{segment, Heatmap, Prediction};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        Self { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn add(&mut self, truth: Label, predicted: Label) {
        match (truth.is_positive(), predicted.is_positive()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Two-by-two table with positives first.
    pub fn to_table(&self) -> String {
        let w = [self.tp, self.fn_, self.fp, self.tn]
            .iter()
            .map(|v| v.to_string().len())
            .max()
            .unwrap()
            .max(8);
        format!(
            "{:>16}  {:>w$}  {:>w$}\n{:>16}  {:>w$}  {:>w$}\n{:>16}  {:>w$}  {:>w$}\n",
            "truth \\ pred",
            "Positive",
            "Negative",
            "Positive",
            self.tp,
            self.fn_,
            "Negative",
            self.fp,
            self.tn,
        )
    }
}

/// Undefined ratios (zero denominators) are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    if cm.total() == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(ClassificationMetrics {
        accuracy: (cm.tp + cm.tn) as f64 / cm.total() as f64,
        precision,
        recall,
        f1,
    })
}

fn check_shapes<A, B>(a: &Array2<A>, b: &Array2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Average precision of the pixel ranking by descending heatmap value:
/// the mean over relevant pixels of the precision at their rank. Equal
/// values keep row-major order.
pub fn pixel_ap(values: &Array2<f64>, gt: &Array2<bool>) -> Result<f64> {
    check_shapes(values, gt)?;
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Err(Error::invalid("ground-truth mask has no positive pixels"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("heatmap contains NaN"));
    }
    let flat_v: Vec<f64> = values.iter().copied().collect();
    let flat_g: Vec<bool> = gt.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat_v.len()).collect();
    order.sort_by(|&a, &b| flat_v[b].total_cmp(&flat_v[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if flat_g[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// What evaluation needs to know about a test image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub label: Label,
    /// Binary target mask; required for positive images when pixel metrics
    /// are computed.
    pub mask: Option<Array2<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    pub iou: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_ap: Option<f64>,
    pub n_images_pixel_eval: usize,
    pub seg_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_image: Vec<ImageScores>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    /// `key = value` lines in the order accuracy, precision, recall, f1,
    /// iou, ap, followed by counts.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy = {:.6}", self.accuracy);
        let _ = writeln!(s, "precision = {}", fmt_opt(self.precision));
        let _ = writeln!(s, "recall = {}", fmt_opt(self.recall));
        let _ = writeln!(s, "f1 = {}", fmt_opt(self.f1));
        if self.seg_threshold.is_some() {
            let _ = writeln!(s, "mean_iou = {}", fmt_opt(self.mean_iou));
            let _ = writeln!(s, "mean_ap = {}", fmt_opt(self.mean_ap));
            let _ = writeln!(s, "seg_threshold = {}", fmt_opt(self.seg_threshold));
            let _ = writeln!(s, "n_images_pixel_eval = {}", self.n_images_pixel_eval);
        }
        let cm = &self.confusion;
        let _ = writeln!(s, "tp = {}\nfn = {}\nfp = {}\ntn = {}", cm.tp, cm.fn_, cm.fp, cm.tn);
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Human-readable summary: confusion table then one metrics row.
    pub fn summary(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "   n/a".to_string(), |v| format!("{:5.1}%", 100.0 * v));
        let mut s = self.confusion.to_table();
        s.push('\n');
        let _ = writeln!(s, "Accuracy  Precision  Recall  F1-score  IoU     AP");
        let _ = writeln!(
            s,
            "{}    {}     {}  {}    {}  {}",
            pct(Some(self.accuracy)),
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
            pct(self.mean_iou),
            pct(self.mean_ap)
        );
        s
    }
}

/// IoU of the threshold-`a` segmentation and AP of the raw ranking.
pub fn score_image(image_id: &str, heatmap: &Heatmap, gt: &Array2<bool>, a: f64) -> Result<ImageScores> {
    let pred_mask = segment(heatmap, a)?;
    Ok(ImageScores {
        image_id: image_id.to_string(),
        iou: iou(&pred_mask, gt)?,
        ap: pixel_ap(&heatmap.values, gt)?,
    })
}

/// Assembles a report from a confusion matrix and, when pixel metrics were
/// computed, the per-image scores of the ground-truth positive images.
pub fn summarize(confusion: ConfusionMatrix, scores: Option<Vec<ImageScores>>, a: f64) -> Result<MetricsReport> {
    let cls = classification_metrics(&confusion)?;
    let (mean_iou, mean_ap, n, seg_threshold, per_image) = match scores {
        None => (None, None, 0, None, Vec::new()),
        Some(mut scores) => {
            scores.sort_by(|x, y| x.image_id.cmp(&y.image_id));
            let n = scores.len();
            let mean = |f: fn(&ImageScores) -> f64| (n > 0).then(|| scores.iter().map(f).sum::<f64>() / n as f64);
            (mean(|s| s.iou), mean(|s| s.ap), n, Some(a), scores)
        }
    };
    Ok(MetricsReport {
        confusion,
        accuracy: cls.accuracy,
        precision: cls.precision,
        recall: cls.recall,
        f1: cls.f1,
        mean_iou,
        mean_ap,
        n_images_pixel_eval: n,
        seg_threshold,
        per_image,
    })
}

/// Confusion matrix over all records; mean IoU and AP over ground-truth
/// positives only, with masks taken at threshold `a`. Pass `heatmaps: None`
/// for classification-only reports.
pub fn evaluate_testset(
    predictions: &[Prediction],
    heatmaps: Option<&HashMap<String, Heatmap>>,
    records: &[GroundTruth],
    a: f64,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::invalid("no test records"));
    }
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !by_id.contains_key(r.image_id.as_str()))
        .map(|r| r.image_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("missing predictions for: {}", missing.join(", "))));
    }
    let mut confusion = ConfusionMatrix::default();
    for r in records {
        confusion.add(r.label, by_id[r.image_id.as_str()].label);
    }
    let scores = match heatmaps {
        None => None,
        Some(maps) => {
            let positives: Vec<&GroundTruth> = records.iter().filter(|r| r.label.is_positive()).collect();
            let mut missing: Vec<String> = positives
                .iter()
                .filter(|r| !maps.contains_key(&r.image_id))
                .map(|r| r.image_id.clone())
                .collect();
            if !missing.is_empty() {
                missing.sort();
                missing.dedup();
                return Err(Error::MissingHeatmaps { ids: missing });
            }
            let scores = positives
                .par_iter()
                .map(|r| {
                    let gt = r
                        .mask
                        .as_ref()
                        .ok_or_else(|| Error::invalid(format!("{}: positive record has no mask", r.image_id)))?;
                    score_image(&r.image_id, &maps[&r.image_id], gt, a)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(scores)
        }
    };
    summarize(confusion, scores, a)
}
