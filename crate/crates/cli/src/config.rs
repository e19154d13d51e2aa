use std::path::{Path, PathBuf};

use advmask::augment::AugmentationSpec;
use advmask::data::{SyntheticConfig, Task};
use advmask::training::{PretrainConfig, TransferConfig};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Scarcity-sweep axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    /// Seeds used are `seed, seed + 1, …`.
    pub n_seeds: usize,
    pub tasks: Vec<Task>,
    /// Add the end-to-end Scratch arm.
    pub scratch: bool,
    /// Add a frozen, randomly initialised encoder arm.
    pub random_init: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![1.0, 0.1, 0.01],
            n_seeds: 3,
            tasks: vec![Task::Arrhythmia, Task::Gender],
            scratch: false,
            random_init: false,
        }
    }
}

/// Everything a command may need, as one JSON document. The top-level
/// `seed` overrides the seeds of the nested sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub pretrain: PretrainConfig,
    pub transfer: TransferConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            data: None,
            checkpoint: None,
            synthetic: SyntheticConfig::default(),
            pretrain: PretrainConfig::default(),
            transfer: TransferConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).context("config is not valid JSON")?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_SCHEMA_VERSION as u64 => {}
            Some(v) => bail!(
                "config schema version {v} is not supported (expected {CONFIG_SCHEMA_VERSION})"
            ),
            None => bail!("config has no schema_version (expected {CONFIG_SCHEMA_VERSION})"),
        }
        let config: RunConfig = serde_json::from_value(value).context("invalid config")?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// Copies the top-level seed into every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.transfer.seed = seed;
        self
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        (0..self.sweep.n_seeds as u64)
            .map(|k| self.seed + k)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.pretrain.validate()?;
        self.transfer.validate()?;
        if self
            .sweep
            .fractions
            .iter()
            .any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            bail!(
                "sweep fractions must lie in (0, 1], got {:?}",
                self.sweep.fractions
            );
        }
        Ok(())
    }
}

/// Sets the mask count of the adversarial step of `spec`.
pub fn set_n_masks(spec: &mut AugmentationSpec, n: usize) -> Result<()> {
    match spec {
        AugmentationSpec::Adversarial(p) => {
            p.n_masks = n;
            Ok(())
        }
        AugmentationSpec::Compose(c) => {
            let mut found = false;
            for step in &mut c.steps {
                if set_n_masks(step, n).is_ok() {
                    found = true;
                }
            }
            if found {
                Ok(())
            } else {
                bail!(
                    "--n-masks needs an augmentation with an adversarial step, got {}",
                    spec.name()
                )
            }
        }
        other => bail!(
            "--n-masks needs an augmentation with an adversarial step, got {}",
            other.name()
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let config = RunConfig::default().with_seed(4);
        let back = RunConfig::from_json(&config.to_json().unwrap()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        let err = RunConfig::from_json(r#"{"schema_version":1,"lr":3}"#).unwrap_err();
        assert!(format!("{err:#}").contains("lr"), "{err:#}");
        let err = RunConfig::from_json(r#"{"schema_version":9}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains('9') && err.contains('1'), "{err}");
        assert!(RunConfig::from_json("{}").is_err());
        let partial =
            RunConfig::from_json(r#"{"schema_version":1,"pretrain":{"max_epochs":2}}"#).unwrap();
        assert_eq!(partial.pretrain.max_epochs, 2);
        assert_eq!(partial.pretrain.batch_size, 32);
    }

    #[test]
    fn n_masks_reaches_nested_steps() {
        let mut spec = AugmentationSpec::from_name("wander+adversarial").unwrap();
        set_n_masks(&mut spec, 12).unwrap();
        assert_eq!(spec.adversarial_plan().unwrap().unwrap().n_masks, 12);
        let mut plain = AugmentationSpec::from_name("gaussian").unwrap();
        assert!(set_n_masks(&mut plain, 2).is_err());
    }
}
