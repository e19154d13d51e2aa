//! Adversarial pretraining, linear-probe transfer, the Scratch baseline and
//! the data-scarcity sweep.

mod pretrain;
mod sweep;
mod transfer;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::{AdversarialParams, AugmentationSpec};
use crate::data::{SplitFractions, Task};
use crate::error::{Error, Result};
use crate::nn::EncoderConfig;
use crate::objectives::ObjectiveConfig;

pub use pretrain::{pretrain, PreparedBatch, PretrainOutput, Pretrainer, WindowStats};
pub use sweep::{scarcity_sweep, SweepArm, SweepCell, SweepResult, SweepSpec};
pub use transfer::{
    accuracy, evaluate, predict, supervised_window, train_scratch, transfer_train, TransferResult,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr_encoder: f32,
    pub lr_adversary: f32,
    pub batch_size: usize,
    /// Batches whose gradients are summed before each optimizer step.
    pub grad_accum_batches: usize,
    pub max_epochs: usize,
    /// Epochs without an improvement of `min_delta` in mean L_SSL before stopping.
    pub early_stop_patience: usize,
    pub min_delta: f32,
    pub augmentation: AugmentationSpec,
    pub objective: ObjectiveConfig,
    pub encoder: EncoderConfig,
    /// Width of the first mask-generator level.
    pub mask_base_channels: usize,
    /// Step the mask generator before the encoder in each window.
    pub adversary_first: bool,
    /// Draw a fresh mask index for the adversary instead of sharing the encoder's.
    pub resample_mask_index: bool,
    /// Fill `wall_time_s` in metrics; off by default so runs are reproducible.
    pub record_wall_time: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 1e-4,
            lr_adversary: 1e-4,
            batch_size: 32,
            grad_accum_batches: 4,
            max_epochs: 100,
            early_stop_patience: 10,
            min_delta: 1e-3,
            augmentation: AugmentationSpec::Adversarial(AdversarialParams::default()),
            objective: ObjectiveConfig::default(),
            encoder: EncoderConfig::default(),
            mask_base_channels: 8,
            adversary_first: false,
            resample_mask_index: false,
            record_wall_time: false,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_batches
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("pretrain config", reason));
        if !(self.lr_encoder > 0.0 && self.lr_adversary > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch size must be at least 2 for in-batch negatives, got {}",
                self.batch_size
            ));
        }
        if self.grad_accum_batches == 0 {
            return bad("grad_accum_batches must be at least 1".into());
        }
        if self.mask_base_channels == 0 {
            return bad("mask_base_channels must be at least 1".into());
        }
        self.augmentation.validate()?;
        self.objective.validate()?;
        self.encoder.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub task: Task,
    pub max_epochs: usize,
    /// Share of the training split used to fit the probe.
    pub fraction: f64,
    /// Probe initialisation, batch order and subsampling.
    pub seed: u64,
    /// Seed of the train/val/test split when the dataset is not split yet.
    pub split_seed: u64,
    pub split: SplitFractions,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 256,
            task: Task::Arrhythmia,
            max_epochs: 50,
            fraction: 1.0,
            seed: 0,
            split_seed: 0,
            split: SplitFractions::default(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("transfer config", reason));
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!(
                "fraction must lie in (0, 1], got {}",
                self.fraction
            ));
        }
        self.split.validate()
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub epoch: usize,
    pub l_ssl: Option<f32>,
    pub l_sparse: Option<f32>,
    pub accuracy: Option<f64>,
    pub fraction: Option<f64>,
    pub seed: u64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str = "phase,epoch,l_ssl,l_sparse,accuracy,fraction,seed,wall_time_s";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Renders rows as CSV with [`METRICS_HEADER`]; missing values are empty.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.phase,
            r.epoch,
            opt(r.l_ssl),
            opt(r.l_sparse),
            opt(r.accuracy),
            opt(r.fraction),
            r.seed,
            r.wall_time_s
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let p = PretrainConfig::default();
        assert_eq!((p.lr_encoder, p.lr_adversary), (1e-4, 1e-4));
        assert_eq!(p.effective_batch(), 128);
        assert_eq!(p.early_stop_patience, 10);
        let t = TransferConfig::default();
        assert_eq!((t.lr, t.batch_size, t.max_epochs), (0.01, 256, 50));
    }

    #[test]
    fn csv_leaves_missing_fields_empty() {
        let row = MetricsRow {
            phase: "pretrain".into(),
            epoch: 2,
            l_ssl: Some(1.5),
            l_sparse: None,
            accuracy: None,
            fraction: Some(0.1),
            seed: 7,
            wall_time_s: 0.0,
        };
        assert_eq!(
            metrics_csv(&[row]),
            format!("{METRICS_HEADER}\npretrain,2,1.5,,,0.1,7,0\n")
        );
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<PretrainConfig>(r#"{"lr":0.1}"#).is_err());
        let c: PretrainConfig = serde_json::from_str(r#"{"max_epochs":3}"#).unwrap();
        assert_eq!(c.max_epochs, 3);
        assert_eq!(c.batch_size, 32);
    }
}
