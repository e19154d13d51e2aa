//! ECG records, datasets, synthetic generation and splitting.

mod io;
mod split;
mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{
    load_dataset, read_csv_record, read_record_file, save_dataset, write_record_file, Manifest,
    ManifestRecord, Normalization, MANIFEST, SCHEMA_VERSION,
};
pub use split::{split_dataset, subsample_fraction, SplitFractions};
pub use synthetic::{generate_synthetic_ecg, Balance, SyntheticConfig};

pub const N_LEADS: usize = 12;

/// Standard 12-lead order used throughout.
pub const LEAD_NAMES: [&str; N_LEADS] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Rhythm {
    Afib,
    Gsvt,
    Sb,
    Sr,
}

impl Rhythm {
    pub const ALL: [Rhythm; 4] = [Rhythm::Afib, Rhythm::Gsvt, Rhythm::Sb, Rhythm::Sr];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Rhythm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rhythm::Afib => "AFIB",
            Rhythm::Gsvt => "GSVT",
            Rhythm::Sb => "SB",
            Rhythm::Sr => "SR",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub rhythm: Rhythm,
    pub gender: Gender,
}

/// Downstream classification target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Arrhythmia,
    Gender,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::Arrhythmia => Rhythm::ALL.len(),
            Task::Gender => Gender::ALL.len(),
        }
    }

    pub fn class_of(self, labels: &Labels) -> usize {
        match self {
            Task::Arrhythmia => labels.rhythm.index(),
            Task::Gender => labels.gender.index(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Arrhythmia => "arrhythmia",
            Task::Gender => "gender",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One 12-lead recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub id: String,
    /// `[12, D]`.
    pub signal: Tensor,
    pub sampling_rate_hz: f32,
    pub labels: Option<Labels>,
}

impl SignalRecord {
    pub fn new(
        id: impl Into<String>,
        signal: Tensor,
        sampling_rate_hz: f32,
        labels: Option<Labels>,
    ) -> Result<Self> {
        let record = Self {
            id: id.into(),
            signal,
            sampling_rate_hz,
            labels,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.signal.shape().get(1).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord {
            record_id: self.id.clone(),
            reason,
        };
        match *self.signal.shape() {
            [N_LEADS, d] if d > 0 => {}
            [leads, _] if leads != N_LEADS => {
                return Err(bad(format!("expected {N_LEADS} leads, got {leads}")))
            }
            ref s => return Err(bad(format!("signal shape {s:?} is not [12, D>0]"))),
        }
        if let Some(i) = self.signal.data().iter().position(|v| !v.is_finite()) {
            let d = self.len();
            return Err(bad(format!(
                "non-finite value at lead {}, sample {}",
                i / d,
                i % d
            )));
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(bad(format!(
                "sampling rate must be positive, got {}",
                self.sampling_rate_hz
            )));
        }
        Ok(())
    }
}

/// Per-lead z-score; a flat lead is only centred.
pub fn zscore(signal: &mut Tensor) {
    let d = signal.shape()[1];
    for row in signal.data_mut().chunks_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let std = var.sqrt();
        let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
        row.iter_mut()
            .for_each(|v| *v = ((*v as f64 - mean) * scale) as f32);
    }
}

/// Records plus an optional train/val/test assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SignalRecord>,
    /// One tag per record when split.
    pub splits: Option<Vec<Split>>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(records: Vec<SignalRecord>, provenance: impl Into<String>) -> Result<Self> {
        let ds = Self {
            records,
            splits: None,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Length shared by every record.
    pub fn signal_len(&self) -> Option<usize> {
        self.records.first().map(SignalRecord::len)
    }

    pub fn sampling_rate_hz(&self) -> Option<f32> {
        self.records.first().map(|r| r.sampling_rate_hz)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidRecord {
                    record_id: r.id.clone(),
                    reason: "duplicate record id".into(),
                });
            }
            if Some(r.len()) != self.signal_len()
                || Some(r.sampling_rate_hz) != self.sampling_rate_hz()
            {
                return Err(Error::InvalidRecord {
                    record_id: r.id.clone(),
                    reason: "length and sampling rate must match the rest of the dataset".into(),
                });
            }
        }
        if let Some(s) = &self.splits {
            if s.len() != self.records.len() {
                return Err(Error::invalid(
                    "dataset",
                    format!("{} split tags for {} records", s.len(), self.len()),
                ));
            }
        }
        Ok(())
    }

    /// Indices tagged `split`, in record order.
    pub fn indices(&self, split: Split) -> Result<Vec<usize>> {
        let tags = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset", "dataset has not been split"))?;
        Ok(tags
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect())
    }

    /// Stacks the selected records into `[B, 12, D]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self
            .signal_len()
            .ok_or_else(|| Error::invalid("batch", "empty dataset"))?;
        let mut data = Vec::with_capacity(indices.len() * N_LEADS * d);
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or_else(|| Error::invalid("batch", format!("record index {i} out of range")))?;
            data.extend_from_slice(r.signal.data());
        }
        Tensor::new(vec![indices.len(), N_LEADS, d], data)
    }

    /// Class index of each selected record for `task`.
    pub fn targets(&self, indices: &[usize], task: Task) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                let r = &self.records[i];
                r.labels
                    .as_ref()
                    .map(|l| task.class_of(l))
                    .ok_or_else(|| Error::InvalidRecord {
                        record_id: r.id.clone(),
                        reason: format!("no labels for the {task} task"),
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, leads: usize) -> SignalRecord {
        SignalRecord {
            id: id.into(),
            signal: Tensor::new(vec![leads, 4], (0..leads * 4).map(|i| i as f32).collect())
                .unwrap(),
            sampling_rate_hz: 125.0,
            labels: None,
        }
    }

    #[test]
    fn zscore_normalises_each_lead() {
        let mut t = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        zscore(&mut t);
        let a = &t.data()[..4];
        let mean: f32 = a.iter().sum::<f32>() / 4.0;
        let var: f32 = a.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
        assert_eq!(&t.data()[4..], &[0.0; 4]);
    }

    #[test]
    fn record_validation_names_the_record() {
        let err = record("r7", 11).validate().unwrap_err().to_string();
        assert!(err.contains("r7") && err.contains("11"), "{err}");
        let mut r = record("r8", 12);
        r.signal.data_mut()[5] = f32::NAN;
        assert!(r.validate().unwrap_err().to_string().contains("r8"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(Dataset::new(vec![record("a", 12), record("a", 12)], "test").is_err());
    }

    #[test]
    fn targets_need_labels() {
        let ds = Dataset::new(vec![record("a", 12)], "test").unwrap();
        let err = ds.targets(&[0], Task::Gender).unwrap_err().to_string();
        assert!(err.contains("gender"), "{err}");
        assert_eq!(ds.batch(&[0, 0]).unwrap().shape(), &[2, 12, 4]);
    }
}
