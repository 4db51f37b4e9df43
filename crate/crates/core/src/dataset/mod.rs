//! Image records, meta-class labelling and the positive-pixel filter.

pub mod io;
pub mod resize;
pub mod synthetic;

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use resize::{resize_image, resize_mask};
pub use synthetic::{generate_synthetic, SyntheticConfig};

pub const DEFAULT_TARGET_SIZE: usize = 512;
pub const DEFAULT_PIXEL_THRESHOLD: usize = 20_000;

const BUNDLED_FOODSEG103: &str = include_str!("../../data/foodseg103_meta_classes.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn as_f64(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A named union of source-dataset classes treated as one binary target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMetaClass", into = "RawMetaClass")]
pub struct MetaClassMap {
    name: String,
    member_class_ids: BTreeSet<u8>,
}

#[derive(Serialize, Deserialize)]
struct RawMetaClass {
    name: String,
    member_class_ids: Vec<u8>,
}

impl TryFrom<RawMetaClass> for MetaClassMap {
    type Error = Error;

    fn try_from(raw: RawMetaClass) -> Result<Self> {
        MetaClassMap::new(raw.name, raw.member_class_ids)
    }
}

impl From<MetaClassMap> for RawMetaClass {
    fn from(m: MetaClassMap) -> Self {
        RawMetaClass {
            name: m.name,
            member_class_ids: m.member_class_ids.into_iter().collect(),
        }
    }
}

impl MetaClassMap {
    pub fn new(name: impl Into<String>, ids: impl IntoIterator<Item = u8>) -> Result<Self> {
        let name = name.into();
        let mut set = BTreeSet::new();
        for id in ids {
            if id == 0 {
                return Err(Error::invalid(format!("meta-class {name}: class 0 is background")));
            }
            if !set.insert(id) {
                return Err(Error::invalid(format!("meta-class {name}: duplicate class id {id}")));
            }
        }
        if set.is_empty() {
            return Err(Error::invalid(format!("meta-class {name}: no member classes")));
        }
        Ok(Self {
            name,
            member_class_ids: set,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn member_class_ids(&self) -> &BTreeSet<u8> {
        &self.member_class_ids
    }

    #[inline]
    pub fn contains(&self, class_id: u8) -> bool {
        self.member_class_ids.contains(&class_id)
    }

    /// Bundled FoodSeg103 meta-class (`bakery` or `meat`).
    pub fn foodseg103(name: &str) -> Result<Self> {
        bundled_foodseg103()?
            .into_iter()
            .find(|m| m.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("no bundled meta-class named {name:?}")))
    }

    /// 256-entry lookup table for fast mask scans.
    fn lookup(&self) -> [bool; 256] {
        let mut table = [false; 256];
        for &id in &self.member_class_ids {
            table[id as usize] = true;
        }
        table
    }
}

/// All meta-classes shipped with the crate for FoodSeg103.
pub fn bundled_foodseg103() -> Result<Vec<MetaClassMap>> {
    #[derive(Deserialize)]
    struct File {
        meta_class: Vec<Entry>,
    }
    #[derive(Deserialize)]
    struct Entry {
        name: String,
        members: Vec<Member>,
    }
    #[derive(Deserialize)]
    struct Member {
        id: u8,
        #[allow(dead_code)]
        name: String,
    }
    let file: File = toml::from_str(BUNDLED_FOODSEG103).map_err(|e| Error::invalid(e.to_string()))?;
    file.meta_class
        .into_iter()
        .map(|e| MetaClassMap::new(e.name, e.members.into_iter().map(|m| m.id)))
        .collect()
}

/// One preprocessed image with its image-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    /// `D × D × 3`, values in `[0, 1]`.
    pub pixels: Array3<f32>,
    /// `D × D` class ids, when ground truth is available.
    pub mask: Option<Array2<u8>>,
    pub label: Label,
    pub positive_pixel_count: usize,
    pub split: Split,
}

impl ImageRecord {
    pub fn size(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn validate(&self, pixel_threshold: usize) -> Result<()> {
        let (h, w, c) = self.pixels.dim();
        if h != w || c != 3 || h == 0 {
            return Err(Error::invalid(format!(
                "{}: pixels must be D×D×3, got {h}×{w}×{c}",
                self.image_id
            )));
        }
        if let Some(m) = &self.mask {
            if m.dim() != (h, w) {
                return Err(Error::invalid(format!(
                    "{}: mask {:?} does not match image {h}×{w}",
                    self.image_id,
                    m.dim()
                )));
            }
        }
        if self.label.is_positive() != (self.positive_pixel_count >= pixel_threshold) {
            return Err(Error::invalid(format!(
                "{}: label {} inconsistent with {} member pixels at threshold {pixel_threshold}",
                self.image_id, self.label, self.positive_pixel_count
            )));
        }
        Ok(())
    }

    /// Ground-truth binary mask of meta-class pixels.
    pub fn binary_mask(&self, map: &MetaClassMap) -> Option<Array2<bool>> {
        let table = map.lookup();
        self.mask.as_ref().map(|m| m.mapv(|c| table[c as usize]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub target_size: usize,
    pub pixel_threshold: usize,
    pub meta_class: MetaClassMap,
    pub oversample_positives: bool,
}

impl DatasetConfig {
    pub fn new(meta_class: MetaClassMap) -> Self {
        Self {
            target_size: DEFAULT_TARGET_SIZE,
            pixel_threshold: DEFAULT_PIXEL_THRESHOLD,
            meta_class,
            oversample_positives: true,
        }
    }

    /// Fraction of the image area the threshold represents.
    pub fn coverage_fraction(&self) -> f64 {
        self.pixel_threshold as f64 / (self.target_size * self.target_size) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::invalid("target_size must be positive"));
        }
        if self.pixel_threshold == 0 || self.pixel_threshold > self.target_size * self.target_size {
            return Err(Error::invalid("pixel_threshold must be in 1..=D²"));
        }
        Ok(())
    }
}

/// The default threshold scaled to a `size × size` image, preserving the
/// covered area fraction.
pub fn scaled_pixel_threshold(size: usize) -> usize {
    let frac = DEFAULT_PIXEL_THRESHOLD as f64 / (DEFAULT_TARGET_SIZE * DEFAULT_TARGET_SIZE) as f64;
    ((size * size) as f64 * frac).round().max(1.0) as usize
}

pub fn count_member_pixels(mask: &Array2<u8>, map: &MetaClassMap) -> usize {
    let table = map.lookup();
    mask.iter().filter(|&&c| table[c as usize]).count()
}

/// Image-level label from a resized mask. Exactly `pixel_threshold` member
/// pixels counts as positive.
pub fn binarize_label(mask: &Array2<u8>, map: &MetaClassMap, pixel_threshold: usize) -> (Label, usize) {
    let count = count_member_pixels(mask, map);
    (Label::from_bool(count >= pixel_threshold), count)
}

/// Whether a record with `count` member pixels is kept: pure negatives and
/// positives at or above the threshold survive, weak positives do not.
#[inline]
pub fn is_retained(count: usize, pixel_threshold: usize) -> bool {
    count == 0 || count >= pixel_threshold
}

pub fn filter_records(records: Vec<ImageRecord>, config: &DatasetConfig) -> Vec<ImageRecord> {
    records
        .into_iter()
        .filter(|r| is_retained(r.positive_pixel_count, config.pixel_threshold))
        .collect()
}

/// Random access to labelled records, in memory or backed by files.
pub trait RecordSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image_id(&self, index: usize) -> &str;

    fn label(&self, index: usize) -> Label;

    fn load(&self, index: usize) -> Result<std::borrow::Cow<'_, ImageRecord>>;
}

impl RecordSource for [ImageRecord] {
    fn len(&self) -> usize {
        <[ImageRecord]>::len(self)
    }

    fn image_id(&self, index: usize) -> &str {
        &self[index].image_id
    }

    fn label(&self, index: usize) -> Label {
        self[index].label
    }

    fn load(&self, index: usize) -> Result<std::borrow::Cow<'_, ImageRecord>> {
        Ok(std::borrow::Cow::Borrowed(&self[index]))
    }
}

impl RecordSource for Vec<ImageRecord> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn image_id(&self, index: usize) -> &str {
        &self[index].image_id
    }

    fn label(&self, index: usize) -> Label {
        self[index].label
    }

    fn load(&self, index: usize) -> Result<std::borrow::Cow<'_, ImageRecord>> {
        Ok(std::borrow::Cow::Borrowed(&self[index]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(count: usize, threshold: usize) -> ImageRecord {
        ImageRecord {
            image_id: format!("r{count}"),
            pixels: Array3::zeros((4, 4, 3)),
            mask: None,
            label: Label::from_bool(count >= threshold),
            positive_pixel_count: count,
            split: Split::Train,
        }
    }

    fn mask_with_members(n: usize) -> Array2<u8> {
        let mut m = Array2::<u8>::zeros((512, 512));
        for (i, v) in m.iter_mut().enumerate().take(n) {
            *v = if i % 2 == 0 { 58 } else { 10 };
        }
        m
    }

    #[test]
    fn meta_class_invariants() {
        assert!(MetaClassMap::new("x", []).is_err());
        assert!(MetaClassMap::new("x", [0, 3]).is_err());
        assert!(MetaClassMap::new("x", [3, 3]).is_err());
        let m = MetaClassMap::new("x", [4, 3]).unwrap();
        assert!(m.contains(3) && m.contains(4) && !m.contains(0));
    }

    #[test]
    fn bundled_memberships() {
        let bakery = MetaClassMap::foodseg103("bakery").unwrap();
        assert_eq!(bakery.member_class_ids().len(), 4);
        let meat = MetaClassMap::foodseg103("Meat").unwrap();
        assert_eq!(meat.member_class_ids().iter().copied().collect::<Vec<_>>(), vec![46, 47, 48, 49, 50, 51]);
        assert!(bakery.member_class_ids().is_disjoint(meat.member_class_ids()));
        assert!(MetaClassMap::foodseg103("fish").is_err());
    }

    #[test]
    fn default_threshold_covers_about_7_6_percent() {
        let cfg = DatasetConfig::new(MetaClassMap::foodseg103("bakery").unwrap());
        assert!((cfg.coverage_fraction() - 0.076).abs() < 0.0005);
        assert_eq!(scaled_pixel_threshold(512), 20_000);
        assert_eq!(scaled_pixel_threshold(128), 1_250);
    }

    #[test]
    fn binarize_boundaries() {
        let bakery = MetaClassMap::foodseg103("bakery").unwrap();
        assert_eq!(binarize_label(&Array2::zeros((512, 512)), &bakery, 20_000), (Label::Negative, 0));
        assert_eq!(binarize_label(&mask_with_members(20_000), &bakery, 20_000), (Label::Positive, 20_000));
        let (label, count) = binarize_label(&mask_with_members(19_999), &bakery, 20_000);
        assert_eq!((label, count), (Label::Negative, 19_999));
        assert!(!is_retained(count, 20_000));
    }

    #[test]
    fn filter_keeps_pure_negatives_and_strong_positives() {
        let cfg = DatasetConfig::new(MetaClassMap::foodseg103("meat").unwrap());
        let recs = vec![record(0, 20_000), record(10_000, 20_000), record(20_000, 20_000), record(1, 20_000)];
        let kept = filter_records(recs, &cfg);
        let counts: Vec<_> = kept.iter().map(|r| r.positive_pixel_count).collect();
        assert_eq!(counts, vec![0, 20_000]);
        assert_eq!(filter_records(kept.clone(), &cfg), kept);
        for r in &kept {
            r.validate(cfg.pixel_threshold).unwrap();
        }
    }

    #[test]
    fn validate_rejects_mismatched_mask() {
        let mut r = record(0, 10);
        r.mask = Some(Array2::zeros((3, 4)));
        assert!(r.validate(10).is_err());
    }
}
