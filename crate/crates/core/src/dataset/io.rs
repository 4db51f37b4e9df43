//! On-disk dataset layout: 8-bit RGB PNG images, single-channel class-id PNG
//! masks and a tab-separated manifest.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageReader, RgbImage};
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    binarize_label, is_retained, resize_image, resize_mask, DatasetConfig, ImageRecord, Label, MetaClassMap, RecordSource,
    Split,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
/// Records which classes the mask ids of a dataset directory map to.
pub const META_CLASS_FILE: &str = "meta_class.json";
const IMAGE_DIR: &str = "images";
const MASK_DIR: &str = "masks";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    #[serde(with = "optional_path")]
    pub mask_path: Option<PathBuf>,
    pub split: Split,
    pub label: Label,
    pub positive_pixels: usize,
}

mod optional_path {
    use std::path::PathBuf;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Option<PathBuf>, s: S) -> Result<S::Ok, S::Error> {
        match p {
            Some(p) => s.serialize_str(&p.to_string_lossy()),
            None => s.serialize_str(""),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<PathBuf>, D::Error> {
        let s = String::deserialize(d)?;
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    for e in entries {
        wtr.serialize(e).map_err(|err| Error::format(path, err))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e)))
        .collect()
}

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), raw)
        .expect("rgb buffer matches dimensions")
        .mapv(|v| v as f32 / 255.0))
}

pub fn save_rgb(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let raw: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer matches dimensions");
    img.save(path).map_err(|e| Error::format(path, e))
}

/// Reads a class-id mask. Palette PNGs are read by index, not colour.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    if let Ok(mut reader) = decoder.read_info() {
        let info = reader.info();
        let (w, h) = (info.width as usize, info.height as usize);
        let indexed_or_gray = matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale);
        if indexed_or_gray && info.bit_depth == png::BitDepth::Eight {
            let mut buf = vec![0; reader.output_buffer_size().unwrap_or(w * h)];
            let frame = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
            buf.truncate(frame.buffer_size());
            return Array2::from_shape_vec((h, w), buf).map_err(|e| Error::format(path, e));
        }
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("luma buffer matches dimensions"))
}

/// Writes class ids as a palette-index PNG; the palette only aids viewing.
pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(mask_palette());
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    let data: Vec<u8> = mask.iter().copied().collect();
    writer.write_image_data(&data).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

/// Background black, other ids spread over distinct hues.
fn mask_palette() -> Vec<u8> {
    (0..=255u32)
        .flat_map(|i| {
            if i == 0 {
                [0, 0, 0]
            } else {
                let x = i.wrapping_mul(2_654_435_761);
                [(x >> 24) as u8 | 0x40, (x >> 16) as u8 | 0x40, (x >> 8) as u8 | 0x40]
            }
        })
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes records under `dir` and returns the manifest path. Entries are
/// sorted by split then id so reruns produce identical files.
pub fn write_dataset(dir: &Path, records: &[ImageRecord]) -> Result<PathBuf> {
    create_dir(&dir.join(IMAGE_DIR))?;
    create_dir(&dir.join(MASK_DIR))?;
    let mut entries: Vec<ManifestEntry> = records
        .par_iter()
        .map(|r| {
            let image_path = Path::new(IMAGE_DIR).join(format!("{}.png", r.image_id));
            save_rgb(&dir.join(&image_path), &r.pixels)?;
            let mask_path = match &r.mask {
                Some(m) => {
                    let p = Path::new(MASK_DIR).join(format!("{}.png", r.image_id));
                    save_mask(&dir.join(&p), m)?;
                    Some(p)
                }
                None => None,
            };
            Ok(ManifestEntry {
                image_id: r.image_id.clone(),
                image_path,
                mask_path,
                split: r.split,
                label: r.label,
                positive_pixels: r.positive_pixel_count,
            })
        })
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| (a.split, &a.image_id).cmp(&(b.split, &b.image_id)));
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

pub fn write_meta_class(dir: &Path, map: &MetaClassMap) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(META_CLASS_FILE);
    let json = serde_json::to_string_pretty(map).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// The meta-class stored next to a manifest, if any.
pub fn read_meta_class(dir: &Path) -> Result<Option<MetaClassMap>> {
    let path = dir.join(META_CLASS_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::format(&path, e))
}

fn load_entry(base: &Path, e: &ManifestEntry) -> Result<ImageRecord> {
    let pixels = load_rgb(&base.join(&e.image_path))?;
    let mask = e.mask_path.as_ref().map(|p| load_mask(&base.join(p))).transpose()?;
    Ok(ImageRecord {
        image_id: e.image_id.clone(),
        pixels,
        mask,
        label: e.label,
        positive_pixel_count: e.positive_pixels,
        split: e.split,
    })
}

/// Manifest-backed records loaded lazily, for corpora too large to hold in
/// memory.
#[derive(Clone, Debug)]
pub struct ManifestSource {
    base: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl ManifestSource {
    pub fn open(manifest: &Path, split: Option<Split>) -> Result<Self> {
        let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let entries = read_manifest(manifest)?
            .into_iter()
            .filter(|e| split.map_or(true, |s| e.split == s))
            .collect();
        Ok(Self { base, entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn load_all(&self) -> Result<Vec<ImageRecord>> {
        self.entries.par_iter().map(|e| load_entry(&self.base, e)).collect()
    }
}

impl RecordSource for ManifestSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn image_id(&self, index: usize) -> &str {
        &self.entries[index].image_id
    }

    fn label(&self, index: usize) -> Label {
        self.entries[index].label
    }

    fn load(&self, index: usize) -> Result<Cow<'_, ImageRecord>> {
        load_entry(&self.base, &self.entries[index]).map(Cow::Owned)
    }
}

pub fn load_records(manifest: &Path, split: Option<Split>) -> Result<Vec<ImageRecord>> {
    ManifestSource::open(manifest, split)?.load_all()
}

/// One raw split: a directory of images and a parallel directory of masks
/// sharing file stems (FoodSeg103's `img_dir/<split>` and `ann_dir/<split>`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSource {
    pub split: Split,
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrepareSummary {
    /// (split, label) → retained count.
    pub counts: BTreeMap<(Split, Label), usize>,
    pub discarded: BTreeMap<Split, usize>,
    pub manifest: PathBuf,
}

#[derive(Debug, thiserror::Error)]
#[error("{} file(s) failed to prepare", failures.len())]
pub struct PrepareError {
    pub failures: Vec<(PathBuf, String)>,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("jpg" | "jpeg" | "png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Resize, label, filter and write a pixel-annotated corpus.
///
/// Every image must have a mask with the same stem and a `.png` extension.
/// Any per-file failure aborts before the manifest is written.
pub fn prepare(
    sources: &[SplitSource],
    config: &DatasetConfig,
    out_dir: &Path,
) -> std::result::Result<PrepareSummary, PrepareError> {
    let wrap = |e: Error| PrepareError {
        failures: vec![(out_dir.to_path_buf(), e.to_string())],
    };
    config.validate().map_err(wrap)?;
    let mut jobs = Vec::new();
    for src in sources {
        for img in list_images(&src.image_dir).map_err(wrap)? {
            let stem = img.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            jobs.push((src.split, stem.clone(), img, src.mask_dir.join(format!("{stem}.png"))));
        }
    }
    if jobs.is_empty() {
        return Err(PrepareError {
            failures: sources
                .iter()
                .map(|s| (s.image_dir.clone(), "no images found".to_string()))
                .collect(),
        });
    }
    let missing: Vec<_> = jobs
        .iter()
        .filter(|(.., mask)| !mask.is_file())
        .map(|(.., mask)| (mask.clone(), "missing mask".to_string()))
        .collect();
    if !missing.is_empty() {
        return Err(PrepareError { failures: missing });
    }
    create_dir(&out_dir.join(IMAGE_DIR)).map_err(wrap)?;
    create_dir(&out_dir.join(MASK_DIR)).map_err(wrap)?;

    let results: Vec<_> = jobs
        .par_iter()
        .map(|(split, stem, img_path, mask_path)| {
            let run = || -> Result<Option<ManifestEntry>> {
                let pixels = resize_image(load_rgb(img_path)?.view(), config.target_size)?;
                let mask = resize_mask(load_mask(mask_path)?.view(), config.target_size)?;
                let (label, count) = binarize_label(&mask, &config.meta_class, config.pixel_threshold);
                if !is_retained(count, config.pixel_threshold) {
                    return Ok(None);
                }
                let id = format!("{split}_{stem}");
                let image_path = Path::new(IMAGE_DIR).join(format!("{id}.png"));
                let rel_mask = Path::new(MASK_DIR).join(format!("{id}.png"));
                save_rgb(&out_dir.join(&image_path), &pixels)?;
                save_mask(&out_dir.join(&rel_mask), &mask)?;
                Ok(Some(ManifestEntry {
                    image_id: id,
                    image_path,
                    mask_path: Some(rel_mask),
                    split: *split,
                    label,
                    positive_pixels: count,
                }))
            };
            (*split, img_path.clone(), run())
        })
        .collect();

    let mut summary = PrepareSummary::default();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (split, path, r) in results {
        match r {
            Ok(Some(e)) => {
                *summary.counts.entry((split, e.label)).or_default() += 1;
                entries.push(e);
            }
            Ok(None) => *summary.discarded.entry(split).or_default() += 1,
            Err(e) => failures.push((path, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(PrepareError { failures });
    }
    entries.sort_by(|a, b| (a.split, &a.image_id).cmp(&(b.split, &b.image_id)));
    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries).map_err(wrap)?;
    write_meta_class(out_dir, &config.meta_class).map_err(wrap)?;
    summary.manifest = manifest;
    Ok(summary)
}
