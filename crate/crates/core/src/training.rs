//! Two-phase training: frozen backbone, then end-to-end fine-tuning, with
//! per-epoch bag re-sampling and minority-class oversampling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, RecordSource};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::model::nn::{Grads, ParamGroup, ParamSet, Scalar};
use crate::model::{binary_cross_entropy, MilModel};
use crate::patchbag::{sample_bag, GridSpec, PatchBag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub frozen_epochs: usize,
    pub bag_size: usize,
    pub patch_size: usize,
    pub overlap: f64,
    pub batch_size: usize,
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub seed: u64,
    pub oversample: bool,
    /// Fraction of training records held out for per-epoch validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 130,
            frozen_epochs: 50,
            bag_size: 50,
            patch_size: 64,
            overlap: 0.75,
            batch_size: 8,
            head_lr: 1e-4,
            backbone_lr: 1e-5,
            seed: 0,
            oversample: true,
            validation_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frozen_epochs > self.total_epochs {
            return Err(Error::invalid("frozen_epochs exceeds total_epochs"));
        }
        if self.bag_size == 0 || self.batch_size == 0 {
            return Err(Error::invalid("bag_size and batch_size must be at least 1"));
        }
        if !(self.head_lr > 0.0 && self.backbone_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must be in [0, 1)"));
        }
        if self.patch_size == 0 || !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::invalid("invalid patch grid"));
        }
        Ok(())
    }

    pub fn grid(&self, image_size: usize) -> Result<GridSpec> {
        GridSpec::new(image_size, self.patch_size, self.overlap)
    }

    /// Epochs are numbered from 1; the backbone trains from
    /// `frozen_epochs + 1` on.
    pub fn backbone_trainable(&self, epoch: usize) -> bool {
        epoch > self.frozen_epochs
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Stable per-(seed, epoch, image) bag seed. Repeated occurrences of an
/// oversampled image within one epoch get distinct seeds.
pub fn bag_seed(seed: u64, epoch: usize, image_id: &str, occurrence: usize) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(epoch as u64));
    h = splitmix64(h ^ fnv1a(image_id.as_bytes()));
    if occurrence > 0 {
        h = splitmix64(h ^ occurrence as u64);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanEntry {
    /// Index into the record source.
    pub index: usize,
    pub image_id: String,
    pub label: Label,
    pub bag_seed: u64,
}

/// Ordered training visits for one epoch.
///
/// With oversampling on, every record of the majority class appears once and
/// the minority class is topped up with replacement until both counts match
/// (every minority record appears at least once). The order is a
/// deterministic shuffle keyed by `(seed, epoch)`.
pub fn make_epoch_plan<S: RecordSource + ?Sized>(
    records: &S,
    indices: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<PlanEntry>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = indices.iter().partition(|&&i| records.label(i).is_positive());
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "training data needs both classes ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x5eed) ^ splitmix64(epoch as u64));
    let mut visits: Vec<usize> = indices.to_vec();
    if config.oversample && pos.len() != neg.len() {
        let (minority, deficit) = if pos.len() < neg.len() {
            (&pos, neg.len() - pos.len())
        } else {
            (&neg, pos.len() - neg.len())
        };
        visits.extend((0..deficit).map(|_| minority[rng.gen_range(0..minority.len())]));
    }
    visits.shuffle(&mut rng);
    let mut seen = std::collections::HashMap::<usize, usize>::new();
    Ok(visits
        .into_iter()
        .map(|index| {
            let occ = seen.entry(index).or_insert(0);
            let id = records.image_id(index);
            let entry = PlanEntry {
                index,
                image_id: id.to_string(),
                label: records.label(index),
                bag_seed: bag_seed(config.seed, epoch, id, *occ),
            };
            *occ += 1;
            entry
        })
        .collect())
}

/// Adam with one learning rate per parameter group.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: Vec<u64>,
    first: Vec<Option<ArrayD<T>>>,
    second: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: vec![0; params.len()],
            first: vec![None; params.len()],
            second: vec![None; params.len()],
        }
    }

    /// Applies one update to every parameter with a gradient and a learning
    /// rate; `lr(group)` returning `None` leaves that group untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>, lr: impl Fn(ParamGroup) -> Option<f64>) {
        let (b1, b2) = (T::from(self.beta1).unwrap(), T::from(self.beta2).unwrap());
        let eps = T::from(self.eps).unwrap();
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(rate) = lr(params.entry(id).group) else { continue };
            if params.entry(id).group == ParamGroup::Buffer {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = self.first[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (T::one() - b1) * g);
            let v = self.second[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let rate = T::from(rate).unwrap();
            let (m, v) = (self.first[i].as_ref().unwrap(), self.second[i].as_ref().unwrap());
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= rate * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

impl Adam<f32> {
    pub fn snapshot(&self, params: &ParamSet<f32>) -> OptimizerSnapshot {
        let mut snap = OptimizerSnapshot::default();
        for id in params.ids() {
            let i = id.index();
            if let (Some(m), Some(v)) = (&self.first[i], &self.second[i]) {
                let name = params.entry(id).name.clone();
                snap.steps.insert(name.clone(), self.steps[i]);
                snap.first_moment.insert(name.clone(), m.clone());
                snap.second_moment.insert(name, v.clone());
            }
        }
        snap
    }

    pub fn restore(params: &ParamSet<f32>, snap: &OptimizerSnapshot) -> Result<Self> {
        let mut adam = Self::new(params);
        for (name, &steps) in &snap.steps {
            let id = params
                .find(name)
                .ok_or_else(|| Error::invalid(format!("optimizer state for unknown tensor {name}")))?;
            let (Some(m), Some(v)) = (snap.first_moment.get(name), snap.second_moment.get(name)) else {
                return Err(Error::invalid(format!("incomplete optimizer state for {name}")));
            };
            if m.shape() != params.get(id).shape() || v.shape() != params.get(id).shape() {
                return Err(Error::invalid(format!("optimizer state shape mismatch for {name}")));
            }
            adam.steps[id.index()] = steps;
            adam.first[id.index()] = Some(m.clone());
            adam.second[id.index()] = Some(v.clone());
        }
        Ok(adam)
    }
}

/// Mean binary cross-entropy of a batch under the current model.
pub fn batch_loss<T: Scalar>(model: &MilModel<T>, batch: &[(PatchBag, bool)]) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let losses = batch
        .iter()
        .map(|(bag, y)| Ok(binary_cross_entropy(model.forward(bag)?.probability, *y)))
        .collect::<Result<Vec<T>>>()?;
    Ok(losses.iter().copied().sum::<T>() / T::from(batch.len()).unwrap())
}

/// One optimizer update on a batch of bags. Returns the batch mean loss
/// measured before the update. With `train_backbone` off the backbone is
/// neither differentiated nor modified.
pub fn train_step<T: Scalar>(
    model: &mut MilModel<T>,
    optimizer: &mut Adam<T>,
    batch: &[(PatchBag, bool)],
    config: &TrainConfig,
    train_backbone: bool,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let k = batch[0].0.len();
    if batch.iter().any(|(b, _)| b.len() != k) {
        return Err(Error::invalid("all bags in a batch must have the same size"));
    }
    let scale = T::one() / T::from(batch.len()).unwrap();
    let frozen_model = &*model;
    let results = batch
        .par_iter()
        .map(|(bag, y)| frozen_model.loss_and_grads(bag, *y, scale, train_backbone))
        .collect::<Result<Vec<_>>>()?;
    let mut total = T::zero();
    let mut grads = Grads::for_params(model.params());
    for r in results {
        total += r.loss;
        grads.merge(r.grads);
    }
    let loss = total * scale;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss or gradient in batch starting with {}",
            batch[0].0.source_image_id
        )));
    }
    let (head_lr, backbone_lr) = (config.head_lr, config.backbone_lr);
    optimizer.step(model.params_mut(), &grads, |g| match g {
        ParamGroup::Head => Some(head_lr),
        ParamGroup::Backbone if train_backbone => Some(backbone_lr),
        _ => None,
    });
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub backbone_trainable: bool,
    pub mean_loss: f64,
    pub wall_secs: f64,
    pub bags: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where checkpoints are written; also the resume source.
    pub checkpoint: Option<PathBuf>,
    /// Save every n epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub resume: bool,
    /// Directory for `train_log.txt` and `history.json`.
    pub log_dir: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (for interrupted runs).
    pub max_epochs_this_run: Option<usize>,
}

pub struct FitOutcome {
    pub model: MilModel<f32>,
    pub history: Vec<EpochRecord>,
    pub epochs_completed: usize,
}

/// Training state persisted between epochs.
pub struct TrainState {
    pub epoch: usize,
    pub model: MilModel<f32>,
    pub optimizer: Adam<f32>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn fresh(model: MilModel<f32>) -> Self {
        let optimizer = Adam::new(model.params());
        Self {
            epoch: 0,
            model,
            optimizer,
            history: Vec::new(),
        }
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model, self.epoch);
        ck.optimizer = Some(self.optimizer.snapshot(self.model.params()));
        ck.extra.insert("train_config".into(), to_json(config)?);
        ck.extra.insert("history".into(), to_json(&self.history)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let optimizer = match &ck.optimizer {
            Some(snap) => Adam::restore(model.params(), snap)?,
            None => Adam::new(model.params()),
        };
        let history: Vec<EpochRecord> = match ck.extra.get("history") {
            Some(h) => serde_json::from_str(h).map_err(|e| Error::invalid(e.to_string()))?,
            None => Vec::new(),
        };
        if history.len() != ck.epoch {
            return Err(Error::invalid(format!(
                "checkpoint at epoch {} carries {} history entries",
                ck.epoch,
                history.len()
            )));
        }
        Ok(Self {
            epoch: ck.epoch,
            model,
            optimizer,
            history,
        })
    }
}

fn to_json<V: Serialize>(v: &V) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::invalid(e.to_string()))
}

/// Deterministic train/validation split by hashed id.
fn holdout_split<S: RecordSource + ?Sized>(records: &S, config: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    if config.validation_fraction <= 0.0 {
        return ((0..records.len()).collect(), Vec::new());
    }
    let cut = (config.validation_fraction * u64::MAX as f64) as u64;
    (0..records.len()).partition(|&i| splitmix64(fnv1a(records.image_id(i).as_bytes()) ^ config.seed) >= cut)
}

fn load_bag<S: RecordSource + ?Sized>(records: &S, index: usize, grid: &GridSpec, k: usize, seed: u64) -> Result<PatchBag> {
    let rec = records.load(index)?;
    sample_bag(&rec, grid, k, seed)
}

fn validate_epoch<S: RecordSource + ?Sized>(
    model: &MilModel<f32>,
    records: &S,
    indices: &[usize],
    grid: &GridSpec,
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let results = indices
        .par_iter()
        .map(|&i| {
            let bag = load_bag(records, i, grid, config.bag_size, bag_seed(config.seed, 0, records.image_id(i), usize::MAX))?;
            let p = model.forward(&bag)?.probability;
            let y = records.label(i).is_positive();
            Ok((binary_cross_entropy(p, y) as f64, (p >= 0.5) == y))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    Ok((
        results.iter().map(|r| r.0).sum::<f64>() / n,
        results.iter().filter(|r| r.1).count() as f64 / n,
    ))
}

fn append_log(dir: &Path, rec: &EpochRecord, history: &[EpochRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log = dir.join("train_log.txt");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log)
        .map_err(|e| Error::io(&log, e))?;
    let mut line = format!(
        "epoch {:>4}  loss {:.6}  time {:.1}s  backbone {}",
        rec.epoch,
        rec.mean_loss,
        rec.wall_secs,
        if rec.backbone_trainable { "trainable" } else { "frozen" }
    );
    if let (Some(l), Some(a)) = (rec.validation_loss, rec.validation_accuracy) {
        line.push_str(&format!("  val_loss {l:.6}  val_acc {a:.4}"));
    }
    writeln!(f, "{line}").map_err(|e| Error::io(&log, e))?;
    let hist = dir.join("history.json");
    let json = serde_json::to_string_pretty(history).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&hist, json).map_err(|e| Error::io(&hist, e))
}

/// Trains from `initial` (or the resume checkpoint) for the configured
/// schedule.
pub fn fit<S: RecordSource + ?Sized>(
    records: &S,
    initial: MilModel<f32>,
    config: &TrainConfig,
    options: &FitOptions,
) -> Result<FitOutcome> {
    config.validate()?;
    if initial.config().patch_size != config.patch_size {
        return Err(Error::invalid(format!(
            "model patch size {} differs from training patch size {}",
            initial.config().patch_size,
            config.patch_size
        )));
    }
    if records.is_empty() {
        return Err(Error::invalid("no training records"));
    }
    let image_size = records.load(0)?.size();
    let grid = config.grid(image_size)?;
    let (train_idx, val_idx) = holdout_split(records, config);

    let mut state = match (&options.checkpoint, options.resume) {
        (Some(path), true) if path.exists() => {
            let ck = Checkpoint::load(path)?;
            if ck.model_config != *initial.config() {
                return Err(Error::invalid("checkpoint model config differs from requested model"));
            }
            TrainState::from_checkpoint(&ck)?
        }
        _ => TrainState::fresh(initial),
    };
    let mut this_run = 0;
    while state.epoch < config.total_epochs {
        if options.max_epochs_this_run.is_some_and(|m| this_run >= m) {
            break;
        }
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let train_backbone = config.backbone_trainable(epoch);
        let plan = make_epoch_plan(records, &train_idx, config, epoch)?;
        let mut loss_sum = 0.0;
        for batch_plan in plan.chunks(config.batch_size) {
            let batch = batch_plan
                .par_iter()
                .map(|e| Ok((load_bag(records, e.index, &grid, config.bag_size, e.bag_seed)?, e.label.is_positive())))
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut state.model, &mut state.optimizer, &batch, config, train_backbone)?;
            loss_sum += loss as f64 * batch.len() as f64;
        }
        let (validation_loss, validation_accuracy) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (l, a) = validate_epoch(&state.model, records, &val_idx, &grid, config)?;
            (Some(l), Some(a))
        };
        let rec = EpochRecord {
            epoch,
            backbone_trainable: train_backbone,
            mean_loss: loss_sum / plan.len() as f64,
            wall_secs: started.elapsed().as_secs_f64(),
            bags: plan.len(),
            validation_loss,
            validation_accuracy,
        };
        log::info!("epoch {epoch}: loss {:.5} ({:.1}s)", rec.mean_loss, rec.wall_secs);
        state.history.push(rec.clone());
        state.epoch = epoch;
        this_run += 1;
        if let Some(dir) = &options.log_dir {
            append_log(dir, &rec, &state.history)?;
        }
        if let Some(path) = &options.checkpoint {
            let cadence_hit = options.checkpoint_every > 0 && epoch % options.checkpoint_every == 0;
            if cadence_hit || epoch == config.total_epochs {
                state.to_checkpoint(config)?.save(path)?;
            }
        }
    }
    if let Some(path) = &options.checkpoint {
        if state.epoch == 0 || options.max_epochs_this_run.is_some() {
            state.to_checkpoint(config)?.save(path)?;
        }
    }
    Ok(FitOutcome {
        epochs_completed: state.epoch,
        model: state.model,
        history: state.history,
    })
}
