//! Command-line driver: synthetic data, pretraining, linear-probe transfer,
//! scarcity sweeps and augmentation previews.

mod commands;
pub mod config;

use std::path::PathBuf;

use advmask::data::{Balance, Task};
use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_augment_preview, cmd_gen_data, cmd_pretrain, cmd_sweep, cmd_transfer, run, PretrainFiles,
    THREADS_ENV, TRANSFER_HEADER,
};
pub use config::{RunConfig, SweepConfig, CONFIG_SCHEMA_VERSION};

#[derive(Debug, Parser)]
#[command(
    name = "advmask",
    version,
    about = "Adversarial masking for self-supervised ECG pretraining"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory, or file for augment-preview.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic 12-lead dataset.
    GenData(GenDataArgs),
    /// Pretrain an encoder with a contrastive objective.
    Pretrain(PretrainArgs),
    /// Fit a linear probe (or train Scratch) and report test accuracy.
    Transfer(TransferArgs),
    /// Run the label-scarcity sweep over fractions, tasks and seeds.
    Sweep(SweepArgs),
    /// Write original and augmented traces of one record as CSV.
    AugmentPreview(PreviewArgs),
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s.to_ascii_lowercase().as_str() {
        "arrhythmia" | "rhythm" => Ok(Task::Arrhythmia),
        "gender" | "sex" => Ok(Task::Gender),
        other => Err(format!(
            "unknown task {other:?}; valid tasks: arrhythmia, gender"
        )),
    }
}

fn parse_balance(s: &str) -> Result<Balance, String> {
    match s.to_ascii_lowercase().as_str() {
        "chapman" => Ok(Balance::Chapman),
        "uniform" => Ok(Balance::Uniform),
        other => Err(format!(
            "unknown balance {other:?}; valid values: chapman, uniform"
        )),
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("{s:?} is not a number"))?;
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(format!("fraction {f} is outside (0, 1]"))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenDataArgs {
    /// Number of records.
    #[arg(long)]
    pub n: Option<usize>,
    /// Samples per lead.
    #[arg(long)]
    pub length: Option<usize>,
    /// Rhythm class proportions: chapman or uniform.
    #[arg(long, value_parser = parse_balance)]
    pub balance: Option<Balance>,
    /// Leave records without train/val/test tags.
    #[arg(long)]
    pub unsplit: bool,
    /// Replace an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PretrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Augmentation name; join names with '+' to chain them.
    #[arg(long)]
    pub aug: Option<String>,
    /// Number of adversarial masks.
    #[arg(long)]
    pub n_masks: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Learning rate of both players.
    #[arg(long)]
    pub lr: Option<f32>,
    /// Record elapsed seconds in the metrics (breaks byte-reproducibility).
    #[arg(long)]
    pub wall_time: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pretrained checkpoint whose encoder is frozen.
    #[arg(long, conflicts_with_all = ["scratch", "random_init"])]
    pub checkpoint: Option<PathBuf>,
    /// Train encoder and classifier end to end instead.
    #[arg(long, conflicts_with = "random_init")]
    pub scratch: bool,
    /// Probe a frozen, randomly initialised encoder.
    #[arg(long)]
    pub random_init: bool,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Share of the training split with labels.
    #[arg(long, value_parser = parse_fraction)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pretrained checkpoints, one arm each.
    #[arg(long = "checkpoint", value_name = "PATH")]
    pub checkpoints: Vec<PathBuf>,
    /// Add the Scratch arm.
    #[arg(long)]
    pub scratch: bool,
    /// Add a frozen random-encoder arm.
    #[arg(long)]
    pub random_init: bool,
    /// Comma-separated label fractions, e.g. 1.0,0.1,0.01.
    #[arg(long, value_delimiter = ',', num_args = 1.., value_parser = parse_fraction)]
    pub fractions: Option<Vec<f64>>,
    /// Number of seeds per cell.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Restrict to one task.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PreviewArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Record id; the first record by default.
    #[arg(long)]
    pub record: Option<String>,
    /// Augmentation name; join names with '+' to chain them.
    #[arg(long, default_value = "adversarial")]
    pub aug: String,
    /// Checkpoint providing the mask generator.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Mask applied to the trace when fewer than 12 masks exist; random by default.
    #[arg(long)]
    pub mask_index: Option<usize>,
}
