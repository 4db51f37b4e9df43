//! Command implementations. Each command resolves and validates its whole
//! configuration before touching the filesystem.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use attnmil::dataset::io::{prepare, read_meta_class, write_dataset, write_meta_class, ManifestSource, SplitSource};
use attnmil::dataset::synthetic::{generate, synthetic_meta_class};
use attnmil::dataset::{Label, RecordSource, Split};
use attnmil::inference::{accumulate_heatmap, export_outputs, predict, predict_with_heatmap};
use attnmil::metrics::{score_image, summarize, ConfusionMatrix, ImageScores};
use attnmil::model::checkpoint::{load_pretrained_backbone, Checkpoint};
use attnmil::model::{BackboneKind, MilModel};
use attnmil::patchbag::{count_patches, GridSpec};
use attnmil::training::{fit, FitOptions};
use rayon::prelude::*;

use crate::config::{BackboneChoice, RunConfig};
use crate::{Cli, Command, EvalArgs, PrepareArgs, SegmentArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn invalid(e: impl ToString) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(invalid)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(dir) = &cli.data_dir {
        config.dataset.data_dir = dir.clone();
    }
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(invalid("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(runtime)?;
    }
    match cli.command {
        Command::Prepare(args) => cmd_prepare(config, args),
        Command::Synth(args) => cmd_synth(config, args),
        Command::Train(args) => cmd_train(config, args),
        Command::Segment(args) => cmd_segment(config, args),
        Command::Eval(args) => cmd_eval(config, args),
    }
}

fn cmd_prepare(mut config: RunConfig, args: PrepareArgs) -> CliResult<()> {
    let d = &mut config.dataset;
    if let Some(root) = args.raw_root {
        d.raw_root = Some(root);
    }
    if let Some(name) = args.meta_class {
        d.meta_class = name;
        d.member_class_ids = None;
    }
    if let Some(s) = args.target_size {
        d.target_size = s;
    }
    if let Some(t) = args.pixel_threshold {
        d.pixel_threshold = t;
    }
    let dataset_config = d.dataset_config().map_err(invalid)?;
    let root = d
        .raw_root
        .clone()
        .ok_or_else(|| invalid("prepare needs dataset.raw_root or --raw-root"))?;
    require_dir(&root, "raw dataset root")?;
    let sources: Vec<SplitSource> = [(Split::Train, "train"), (Split::Test, "test")]
        .into_iter()
        .map(|(split, name)| SplitSource {
            split,
            image_dir: root.join("Images").join("img_dir").join(name),
            mask_dir: root.join("Images").join("ann_dir").join(name),
        })
        .collect();
    for s in &sources {
        require_dir(&s.image_dir, "image directory")?;
        require_dir(&s.mask_dir, "mask directory")?;
    }

    let summary = prepare(&sources, &dataset_config, &d.data_dir).map_err(|e| {
        for (path, msg) in &e.failures {
            eprintln!("  {}: {msg}", path.display());
        }
        runtime(e)
    })?;
    println!(
        "meta-class {} (threshold {} px at {}x{})",
        dataset_config.meta_class.name(),
        dataset_config.pixel_threshold,
        dataset_config.target_size,
        dataset_config.target_size
    );
    for split in [Split::Train, Split::Test] {
        let get = |l| summary.counts.get(&(split, l)).copied().unwrap_or(0);
        println!(
            "{split}: {} positive, {} negative, {} discarded",
            get(Label::Positive),
            get(Label::Negative),
            summary.discarded.get(&split).copied().unwrap_or(0)
        );
    }
    println!("manifest: {}", summary.manifest.display());
    Ok(())
}

fn cmd_synth(mut config: RunConfig, args: SynthArgs) -> CliResult<()> {
    if let Some(n) = args.n_images {
        config.synth.n_images = n;
    }
    if let Some(s) = args.image_size {
        config.synth.image_size = s;
    }
    let synth = config.synth.synthetic_config(config.seed);
    // Generation itself validates; nothing is written on failure.
    let records = generate(&synth).map_err(invalid)?;
    let manifest = write_dataset(&config.dataset.data_dir, &records).map_err(runtime)?;
    write_meta_class(&config.dataset.data_dir, &synthetic_meta_class()).map_err(runtime)?;
    for split in [Split::Train, Split::Test] {
        let of_split: Vec<_> = records.iter().filter(|r| r.split == split).collect();
        let pos = of_split.iter().filter(|r| r.label.is_positive()).count();
        println!("{split}: {pos} positive, {} negative", of_split.len() - pos);
    }
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn first_image_size(source: &ManifestSource) -> CliResult<usize> {
    if source.is_empty() {
        return Err(invalid("the selected split of the manifest is empty"));
    }
    Ok(source.load(0).map_err(runtime)?.size())
}

fn cmd_train(mut config: RunConfig, args: TrainArgs) -> CliResult<()> {
    let t = &mut config.train;
    macro_rules! set {
        ($field:ident, $target:expr) => {
            if let Some(v) = args.$field {
                $target = v;
            }
        };
    }
    set!(epochs, t.epochs);
    set!(frozen_epochs, t.frozen_epochs);
    set!(bag_size, t.bag_size);
    set!(patch_size, t.patch_size);
    set!(batch_size, t.batch_size);
    set!(head_lr, t.head_lr);
    set!(backbone_lr, t.backbone_lr);
    set!(backbone, config.model.backbone);
    if let Some(p) = args.pretrained_weights {
        config.model.pretrained_weights = Some(p);
    }

    let train_config = config.train_config();
    train_config.validate().map_err(invalid)?;
    let model_config = config.model_config();
    model_config.validate().map_err(invalid)?;
    let manifest = config.dataset.manifest();
    require_file(&manifest, "manifest")?;
    let checkpoint = config.checkpoint_path();
    let resuming = args.resume && checkpoint.is_file();
    if args.resume && !resuming {
        log::warn!("no checkpoint at {}; starting fresh", checkpoint.display());
    }
    let pretrained = match (config.model.backbone, &config.model.pretrained_weights) {
        (BackboneChoice::Resnet34Pretrained, Some(p)) => {
            require_file(p, "pretrained weights")?;
            Some(p.clone())
        }
        (BackboneChoice::Resnet34Pretrained, None) if !resuming => {
            return Err(invalid(
                "the resnet34-pretrained backbone needs model.pretrained_weights or --pretrained-weights",
            ))
        }
        _ => None,
    };
    let source = ManifestSource::open(&manifest, Some(Split::Train)).map_err(runtime)?;
    let image_size = first_image_size(&source)?;
    train_config.grid(image_size).map_err(invalid)?;

    let mut model = MilModel::<f32>::new(model_config, config.seed).map_err(invalid)?;
    if let Some(p) = &pretrained {
        let n = load_pretrained_backbone(&mut model, p).map_err(runtime)?;
        log::info!("loaded {n} pretrained backbone tensors from {}", p.display());
    }
    fs::create_dir_all(&config.output_dir).map_err(|e| runtime(format!("{}: {e}", config.output_dir.display())))?;
    let resolved = config.output_dir.join("config.toml");
    fs::write(&resolved, config.to_toml()).map_err(|e| runtime(format!("{}: {e}", resolved.display())))?;
    let options = FitOptions {
        checkpoint: Some(checkpoint.clone()),
        checkpoint_every: config.train.checkpoint_every,
        resume: args.resume,
        log_dir: Some(config.output_dir.clone()),
        max_epochs_this_run: None,
    };
    let out = fit(&source, model, &train_config, &options).map_err(runtime)?;
    if let Some(last) = out.history.last() {
        println!("epoch {}: mean loss {:.5}", last.epoch, last.mean_loss);
    }
    println!("checkpoint: {}", checkpoint.display());
    Ok(())
}

fn load_model(config: &RunConfig, path: Option<PathBuf>) -> CliResult<(MilModel<f32>, PathBuf)> {
    let path = path.unwrap_or_else(|| config.checkpoint_path());
    require_file(&path, "checkpoint")?;
    let ck = Checkpoint::load(&path).map_err(invalid)?;
    Ok((ck.model().map_err(invalid)?, path))
}

fn dense_grid(config: &RunConfig, model: &MilModel<f32>, source: &ManifestSource) -> CliResult<GridSpec> {
    config.inference.validate().map_err(invalid)?;
    let size = first_image_size(source)?;
    let grid = config
        .inference
        .grid(size, model.config().patch_size)
        .map_err(invalid)?;
    let k = count_patches(&grid).map_err(invalid)?;
    log::info!("dense grid: {k} patches of {0}x{0} per {size}x{size} image", grid.patch_size);
    if matches!(model.config().backbone, BackboneKind::Resnet34Pretrained) && k > 10_000 {
        log::warn!("{k} patches per image; inference will be slow");
    }
    Ok(grid)
}

fn cmd_segment(mut config: RunConfig, args: SegmentArgs) -> CliResult<()> {
    if let Some(a) = args.threshold {
        config.inference.seg_threshold = a;
    }
    if let Some(t) = args.overlap {
        config.inference.overlap = t;
    }
    config.inference.validate().map_err(invalid)?;
    let manifest = config.dataset.manifest();
    require_file(&manifest, "manifest")?;
    let (model, _) = load_model(&config, args.checkpoint)?;
    let split = args.all_test.then_some(Split::Test);
    let source = ManifestSource::open(&manifest, split).map_err(runtime)?;
    let indices: Vec<usize> = if args.all_test {
        (0..source.len()).collect()
    } else {
        let by_id: BTreeMap<&str, usize> = (0..source.len()).map(|i| (source.image_id(i), i)).collect();
        let unknown: Vec<&str> = args
            .ids
            .iter()
            .filter(|id| !by_id.contains_key(id.as_str()))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(invalid(format!("unknown image ids: {}", unknown.join(", "))));
        }
        let mut seen = HashSet::new();
        args.ids
            .iter()
            .filter(|id| seen.insert(id.as_str()))
            .map(|id| by_id[id.as_str()])
            .collect()
    };
    let grid = dense_grid(&config, &model, &source)?;
    let out_dir = config.output_dir.join("segment");
    let inf = &config.inference;
    let lines = indices
        .par_iter()
        .map(|&i| {
            let record = source.load(i).map_err(runtime)?;
            let r = predict(&record, &model, &grid, inf.classification_threshold).map_err(runtime)?;
            let pred = r.prediction;
            // Explicitly requested images always get a heatmap.
            if !args.all_test || inf.heatmaps.wants(&pred, record.label) {
                let weights = r.attention.weights.to_vec();
                let heat = accumulate_heatmap(&weights, &r.origins, &grid)
                    .and_then(|h| h.with_segmentation(inf.seg_threshold))
                    .map_err(runtime)?;
                export_outputs(&out_dir, &pred, &heat, &grid, r.origins.len()).map_err(runtime)?;
            }
            Ok(format!("{}\t{:.6}\t{}", pred.image_id, pred.probability, pred.label))
        })
        .collect::<CliResult<Vec<_>>>()?;
    for l in lines {
        println!("{l}");
    }
    println!("outputs: {}", out_dir.display());
    Ok(())
}

fn cmd_eval(mut config: RunConfig, args: EvalArgs) -> CliResult<()> {
    if let Some(a) = args.threshold {
        config.inference.seg_threshold = a;
    }
    if let Some(t) = args.overlap {
        config.inference.overlap = t;
    }
    config.inference.validate().map_err(invalid)?;
    let manifest = config.dataset.manifest();
    require_file(&manifest, "manifest")?;
    let (model, _) = load_model(&config, args.checkpoint)?;
    let source = ManifestSource::open(&manifest, Some(Split::Test)).map_err(runtime)?;
    let grid = dense_grid(&config, &model, &source)?;
    let inf = &config.inference;
    let pixel = !args.skip_pixel;
    let map = match read_meta_class(&config.dataset.data_dir).map_err(invalid)? {
        Some(map) => map,
        None => config.dataset.meta_class_map().map_err(invalid)?,
    };
    let results = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let record = source.load(i).map_err(runtime)?;
            if pixel && record.label.is_positive() {
                let gt = record
                    .binary_mask(&map)
                    .ok_or_else(|| runtime(format!("{}: positive test image has no mask", record.image_id)))?;
                let (pred, heat) =
                    predict_with_heatmap(&record, &model, &grid, inf.classification_threshold, inf.seg_threshold)
                        .map_err(runtime)?;
                let scores = score_image(&record.image_id, &heat, &gt, inf.seg_threshold).map_err(runtime)?;
                Ok((record.label, pred, Some(scores)))
            } else {
                let r = predict(&record, &model, &grid, inf.classification_threshold).map_err(runtime)?;
                Ok((record.label, r.prediction, None))
            }
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut confusion = ConfusionMatrix::default();
    let mut scores: Vec<ImageScores> = Vec::new();
    for (truth, pred, s) in &results {
        confusion.add(*truth, pred.label);
        scores.extend(s.clone());
    }
    let report = summarize(confusion, pixel.then_some(scores), inf.seg_threshold).map_err(runtime)?;

    let out_dir = config.output_dir.join("eval");
    fs::create_dir_all(&out_dir).map_err(|e| runtime(format!("{}: {e}", out_dir.display())))?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| runtime(format!("{}: {e}", p.display())))
    };
    write("metrics.txt", report.to_key_value())?;
    write("metrics.json", report.to_json().map_err(runtime)? + "\n")?;
    let mut preds = String::from("image_id\tprobability\tpredicted\ttruth\n");
    let mut sorted: Vec<_> = results.iter().collect();
    sorted.sort_by(|a, b| a.1.image_id.cmp(&b.1.image_id));
    for (truth, p, _) in sorted {
        preds.push_str(&format!("{}\t{:.6}\t{}\t{}\n", p.image_id, p.probability, p.label, truth));
    }
    write("predictions.tsv", preds)?;
    print!("{}", report.summary());
    println!("reports: {}", out_dir.display());
    Ok(())
}
