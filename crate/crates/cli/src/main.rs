//! `attnmil` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 failure
//! while running.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::BackboneChoice;

#[derive(Debug, Parser)]
#[command(name = "attnmil", version, about = "Weakly supervised food detection and segmentation with attention MIL")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for sampling, initialization and synthetic data [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for per-image work [default: number of processors].
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Output directory [default: runs/default].
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// Prepared dataset directory holding manifest.tsv [default: data/prepared].
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resize, binarize and filter a pixel-annotated corpus into a manifest.
    Prepare(PrepareArgs),
    /// Generate a synthetic shapes corpus in the manifest format.
    Synth(SynthArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Write heatmaps, segmentations and predictions for selected images.
    Segment(SegmentArgs),
    /// Evaluate classification and localization on the test split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// FoodSeg103 root containing Images/img_dir and Images/ann_dir.
    #[arg(long)]
    pub raw_root: Option<PathBuf>,
    /// Meta-class to detect [default: bakery].
    #[arg(long)]
    pub meta_class: Option<String>,
    /// Side length images are resized to [default: 512].
    #[arg(long)]
    pub target_size: Option<usize>,
    /// Minimum member pixels for a positive image [default: 20000].
    #[arg(long)]
    pub pixel_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of images [default: 200].
    #[arg(long)]
    pub n_images: Option<usize>,
    /// Image side length [default: 128].
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Total epochs [default: 130].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Leading epochs with the backbone frozen [default: 50].
    #[arg(long)]
    pub frozen_epochs: Option<usize>,
    /// Backbone architecture [default: resnet34-pretrained].
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneChoice>,
    /// Pretrained backbone weights (safetensors).
    #[arg(long)]
    pub pretrained_weights: Option<PathBuf>,
    /// Patches per training bag [default: 50].
    #[arg(long)]
    pub bag_size: Option<usize>,
    /// Patch side length [default: 64].
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Bags per optimizer step [default: 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Head learning rate [default: 1e-4].
    #[arg(long)]
    pub head_lr: Option<f64>,
    /// Backbone learning rate once unfrozen [default: 1e-5].
    #[arg(long)]
    pub backbone_lr: Option<f64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Checkpoint to load [default: <output-dir>/checkpoint.safetensors].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image ids from the manifest.
    #[arg(required_unless_present = "all_test", conflicts_with = "all_test")]
    pub ids: Vec<String>,
    /// Process every test-split image.
    #[arg(long)]
    pub all_test: bool,
    /// Segmentation threshold on normalized heatmap values [default: 0.3].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Overlap of the dense inference grid [default: 0.875].
    #[arg(long)]
    pub overlap: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to load [default: <output-dir>/checkpoint.safetensors].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report classification metrics only.
    #[arg(long)]
    pub skip_pixel: bool,
    /// Segmentation threshold on normalized heatmap values [default: 0.3].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Overlap of the dense inference grid [default: 0.875].
    #[arg(long)]
    pub overlap: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
