//! Checkpoints as safetensors archives.
//!
//! Model tensors are stored under their parameter names, optimizer moments
//! under `optimizer.m.<name>` / `optimizer.v.<name>`. The header metadata
//! holds one JSON object with the format tag, model config, epoch,
//! per-parameter optimizer step counts and any caller-supplied entries.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{MilModel, ModelConfig};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "attnmil-checkpoint/1";
const HEADER_KEY: &str = "attnmil";
const OPT_FIRST: &str = "optimizer.m.";
const OPT_SECOND: &str = "optimizer.v.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerSnapshot {
    /// Update count per parameter name.
    pub steps: BTreeMap<String, u64>,
    pub first_moment: BTreeMap<String, ArrayD<f32>>,
    pub second_moment: BTreeMap<String, ArrayD<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &MilModel<f32>, epoch: usize) -> Self {
        Self {
            model_config: model.config().clone(),
            epoch,
            tensors: model
                .params()
                .iter()
                .map(|(e, t)| (e.name.clone(), t.clone()))
                .collect(),
            optimizer: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> Result<MilModel<f32>> {
        let mut model = MilModel::new(self.model_config.clone(), 0)?;
        model.load_tensors(self.tensors.iter().map(|(k, v)| (k.as_str(), v.clone())), true)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), FORMAT_TAG.to_string());
        meta.insert(
            "model_config".to_string(),
            serde_json::to_string(&self.model_config).map_err(|e| Error::invalid(e.to_string()))?,
        );
        meta.insert("epoch".to_string(), self.epoch.to_string());
        if let Some(opt) = &self.optimizer {
            meta.insert(
                "optimizer_steps".to_string(),
                serde_json::to_string(&opt.steps).map_err(|e| Error::invalid(e.to_string()))?,
            );
        }
        for (k, v) in &self.extra {
            meta.entry(format!("extra.{k}")).or_insert_with(|| v.clone());
        }
        // A single header entry keeps the archive bytes independent of hash
        // map iteration order.
        let header = HashMap::from([(
            HEADER_KEY.to_string(),
            serde_json::to_string(&meta).map_err(|e| Error::invalid(e.to_string()))?,
        )]);

        let mut named: Vec<(String, &ArrayD<f32>)> = self.tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(opt) = &self.optimizer {
            named.extend(opt.first_moment.iter().map(|(k, v)| (format!("{OPT_FIRST}{k}"), v)));
            named.extend(opt.second_moment.iter().map(|(k, v)| (format!("{OPT_SECOND}{k}"), v)));
        }
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = named
            .into_iter()
            .map(|(k, v)| {
                let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                (k, v.shape().to_vec(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::tensor::serialize(views, &Some(header)).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::InvalidInput(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let invalid = |m: String| Error::invalid(m);
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| invalid(e.to_string()))?;
        let meta: BTreeMap<String, String> = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .map(|json| serde_json::from_str(json))
            .transpose()
            .map_err(|e| invalid(e.to_string()))?
            .unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT_TAG) {
            return Err(invalid("not an attnmil checkpoint".into()));
        }
        let field = |k: &str| meta.get(k).ok_or_else(|| invalid(format!("checkpoint metadata lacks {k}")));
        let model_config: ModelConfig = serde_json::from_str(field("model_config")?).map_err(|e| invalid(e.to_string()))?;
        let epoch = field("epoch")?.parse().map_err(|_| invalid("bad epoch".into()))?;
        let steps: Option<BTreeMap<String, u64>> = meta
            .get("optimizer_steps")
            .map(|s| serde_json::from_str(s))
            .transpose()
            .map_err(|e| invalid(e.to_string()))?;
        let extra = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
            .collect();

        let st = SafeTensors::deserialize(bytes).map_err(|e| invalid(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        let has_optimizer = steps.is_some();
        let mut opt = OptimizerSnapshot {
            steps: steps.unwrap_or_default(),
            ..Default::default()
        };
        for (name, view) in st.tensors() {
            let array = to_array(&view).map_err(|m| invalid(format!("{name}: {m}")))?;
            if let Some(k) = name.strip_prefix(OPT_FIRST) {
                opt.first_moment.insert(k.to_string(), array);
            } else if let Some(k) = name.strip_prefix(OPT_SECOND) {
                opt.second_moment.insert(k.to_string(), array);
            } else {
                tensors.insert(name, array);
            }
        }
        Ok(Self {
            model_config,
            epoch,
            tensors,
            optimizer: has_optimizer.then_some(opt),
            extra,
        })
    }
}

fn to_array(view: &TensorView<'_>) -> std::result::Result<ArrayD<f32>, String> {
    let data = view.data();
    let values: Vec<f32> = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as f32)
            .collect(),
        other => return Err(format!("unsupported dtype {other:?}")),
    };
    ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| e.to_string())
}

/// Loads torchvision-named ResNet weights (`conv1.weight`,
/// `layer1.0.bn1.running_mean`, …) from a safetensors file into the
/// backbone. Classifier (`fc.*`) and `num_batches_tracked` entries are
/// ignored; every backbone tensor must be present.
pub fn load_pretrained_backbone(model: &mut MilModel<f32>, path: &Path) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e))?;
    let mut tensors = Vec::new();
    for (name, view) in st.tensors() {
        if name.starts_with("fc.") || name.ends_with("num_batches_tracked") {
            continue;
        }
        let array = to_array(&view).map_err(|m| Error::format(path, format!("{name}: {m}")))?;
        tensors.push((format!("backbone.{name}"), array));
    }
    let expected = model
        .params()
        .iter()
        .filter(|(e, _)| e.name.starts_with("backbone."))
        .count();
    let loaded = model.load_tensors(tensors.iter().map(|(k, v)| (k.as_str(), v.clone())), false)?;
    if loaded != expected {
        return Err(Error::format(
            path,
            format!("pretrained file supplies {loaded} of {expected} backbone tensors"),
        ));
    }
    Ok(loaded)
}
