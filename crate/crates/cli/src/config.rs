//! Run configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use attnmil::dataset::synthetic::SyntheticConfig;
use attnmil::dataset::{
    bundled_foodseg103, DatasetConfig, MetaClassMap, DEFAULT_PIXEL_THRESHOLD, DEFAULT_TARGET_SIZE,
};
use attnmil::inference::{
    HeatmapPolicy, DEFAULT_CLASSIFICATION_THRESHOLD, DEFAULT_SEGMENTATION_THRESHOLD, DEFAULT_TEST_OVERLAP,
};
use attnmil::model::{BackboneKind, ModelConfig, DEFAULT_ATTENTION_DIM, DEFAULT_EMBED_DIM};
use attnmil::patchbag::GridSpec;
use attnmil::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub inference: InferenceSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            synth: SynthSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            inference: InferenceSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Raw FoodSeg103 root containing `Images/img_dir` and `Images/ann_dir`.
    pub raw_root: Option<PathBuf>,
    /// Prepared dataset directory holding `manifest.tsv`.
    pub data_dir: PathBuf,
    /// Bundled meta-class name, or the name of a custom one.
    pub meta_class: String,
    /// Member class ids for a custom meta-class.
    pub member_class_ids: Option<Vec<u8>>,
    pub target_size: usize,
    pub pixel_threshold: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            raw_root: None,
            data_dir: PathBuf::from("data/prepared"),
            meta_class: "bakery".into(),
            member_class_ids: None,
            target_size: DEFAULT_TARGET_SIZE,
            pixel_threshold: DEFAULT_PIXEL_THRESHOLD,
        }
    }
}

impl DatasetSection {
    pub fn meta_class_map(&self) -> attnmil::Result<MetaClassMap> {
        match &self.member_class_ids {
            Some(ids) => MetaClassMap::new(self.meta_class.clone(), ids.iter().copied()),
            None => MetaClassMap::foodseg103(&self.meta_class).map_err(|_| {
                let known: Vec<String> = bundled_foodseg103()
                    .map(|m| m.into_iter().map(|m| m.name().to_string()).collect())
                    .unwrap_or_default();
                attnmil::Error::InvalidInput(format!(
                    "unknown meta-class '{}' (bundled: {}); set member_class_ids for a custom one",
                    self.meta_class,
                    known.join(", ")
                ))
            }),
        }
    }

    pub fn dataset_config(&self) -> attnmil::Result<DatasetConfig> {
        let mut cfg = DatasetConfig::new(self.meta_class_map()?);
        cfg.target_size = self.target_size;
        cfg.pixel_threshold = self.pixel_threshold;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir.join(attnmil::dataset::io::MANIFEST_FILE)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_images: usize,
    pub image_size: usize,
    pub pixel_threshold: Option<usize>,
    pub positive_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            n_images: d.n_images,
            image_size: d.image_size,
            pixel_threshold: d.pixel_threshold,
            positive_fraction: d.positive_fraction,
            test_fraction: d.test_fraction,
        }
    }
}

impl SynthSection {
    pub fn synthetic_config(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            seed,
            n_images: self.n_images,
            image_size: self.image_size,
            pixel_threshold: self.pixel_threshold,
            positive_fraction: self.positive_fraction,
            test_fraction: self.test_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneChoice {
    Resnet34Pretrained,
    SmallCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneChoice,
    pub small_cnn_widths: [usize; 3],
    /// Safetensors export of ImageNet ResNet-34 weights (torchvision names).
    pub pretrained_weights: Option<PathBuf>,
    pub embed_dim: usize,
    pub attention_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let BackboneKind::SmallCnn { widths } = BackboneKind::small_cnn() else {
            unreachable!()
        };
        Self {
            backbone: BackboneChoice::Resnet34Pretrained,
            small_cnn_widths: widths,
            pretrained_weights: None,
            embed_dim: DEFAULT_EMBED_DIM,
            attention_dim: DEFAULT_ATTENTION_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub frozen_epochs: usize,
    pub bag_size: usize,
    pub patch_size: usize,
    pub overlap: f64,
    pub batch_size: usize,
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub oversample: bool,
    pub validation_fraction: f64,
    /// Save a checkpoint every n epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.total_epochs,
            frozen_epochs: d.frozen_epochs,
            bag_size: d.bag_size,
            patch_size: d.patch_size,
            overlap: d.overlap,
            batch_size: d.batch_size,
            head_lr: d.head_lr,
            backbone_lr: d.backbone_lr,
            oversample: d.oversample,
            validation_fraction: d.validation_fraction,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub overlap: f64,
    pub seg_threshold: f64,
    pub classification_threshold: f64,
    pub heatmaps: HeatmapPolicy,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            overlap: DEFAULT_TEST_OVERLAP,
            seg_threshold: DEFAULT_SEGMENTATION_THRESHOLD,
            classification_threshold: DEFAULT_CLASSIFICATION_THRESHOLD,
            heatmaps: HeatmapPolicy::default(),
        }
    }
}

impl InferenceSection {
    pub fn validate(&self) -> attnmil::Result<()> {
        for (name, v) in [
            ("seg_threshold", self.seg_threshold),
            ("classification_threshold", self.classification_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(attnmil::Error::InvalidInput(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(attnmil::Error::InvalidInput(format!(
                "inference overlap {} outside [0, 1)",
                self.overlap
            )));
        }
        Ok(())
    }

    pub fn grid(&self, image_size: usize, patch_size: usize) -> attnmil::Result<GridSpec> {
        GridSpec::new(image_size, patch_size, self.overlap)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            total_epochs: t.epochs,
            frozen_epochs: t.frozen_epochs,
            bag_size: t.bag_size,
            patch_size: t.patch_size,
            overlap: t.overlap,
            batch_size: t.batch_size,
            head_lr: t.head_lr,
            backbone_lr: t.backbone_lr,
            seed: self.seed,
            oversample: t.oversample,
            validation_fraction: t.validation_fraction,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let backbone = match self.model.backbone {
            BackboneChoice::Resnet34Pretrained => BackboneKind::Resnet34Pretrained,
            BackboneChoice::SmallCnn => BackboneKind::SmallCnn {
                widths: self.model.small_cnn_widths,
            },
        };
        ModelConfig {
            backbone,
            patch_size: self.train.patch_size,
            embed_dim: self.model.embed_dim,
            attention_dim: self.model.attention_dim,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.safetensors")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_encode_reference_protocol() {
        let c = RunConfig::default();
        let t = c.train_config();
        assert_eq!((t.total_epochs, t.frozen_epochs, t.bag_size, t.patch_size), (130, 50, 50, 64));
        assert_eq!(t.overlap, 0.75);
        assert_eq!((c.inference.overlap, c.inference.seg_threshold), (0.875, 0.3));
        assert_eq!(c.inference.classification_threshold, 0.5);
        assert_eq!(c.model.backbone, BackboneChoice::Resnet34Pretrained);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[train]\nepochs = 5\n[model]\nbackbone = \"small-cnn\"\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.frozen_epochs, 50);
        assert!(matches!(c.model_config().backbone, BackboneKind::SmallCnn { .. }));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
    }

    #[test]
    fn custom_meta_class() {
        let mut d = DatasetSection {
            meta_class: "noodles".into(),
            ..Default::default()
        };
        assert!(d.meta_class_map().is_err());
        d.member_class_ids = Some(vec![60, 61]);
        assert!(d.meta_class_map().unwrap().contains(61));
    }
}
