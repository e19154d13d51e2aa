use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{zscore, Dataset, Gender, Labels, Rhythm, SignalRecord, Split, LEAD_NAMES, N_LEADS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ECG1";
const FORMAT: &str = "advmask-ecg";
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Whether stored values are already z-scored per lead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Zscore,
    /// Raw values; normalised on load.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub schema_version: u32,
    pub sampling_rate_hz: f32,
    pub length: usize,
    pub lead_order: Vec<String>,
    pub normalization: Normalization,
    pub provenance: String,
    #[serde(default)]
    pub class_counts: BTreeMap<String, usize>,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the dataset directory; `.ecg` binary or `.csv`.
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhythm: Option<Rhythm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn safe_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.')
}

/// `"ECG1"`, u32 leads, u32 length, then leads×length little-endian f32.
pub fn write_record_file(path: &Path, signal: &Tensor) -> Result<()> {
    let [leads, len] = *signal.shape() else {
        return Err(Error::shapes("write_record_file", &[signal.shape()]));
    };
    let mut bytes = Vec::with_capacity(12 + 4 * signal.numel());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(leads as u32).to_le_bytes());
    bytes.extend_from_slice(&(len as u32).to_le_bytes());
    for v in signal.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_record_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "missing ECG1 header"));
    }
    let word =
        |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (leads, len) = (word(4), word(8));
    let expected = leads
        .checked_mul(len)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| format_err(path, "header dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!(
                "{leads}×{len} payload needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![leads, len], data)
}

/// Reads a CSV with one column per lead, named in the header in any order.
pub fn read_csv_record(path: &Path, id: &str) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| format_err(path, "empty CSV"))?;
    let bad = |reason: String| Error::InvalidRecord {
        record_id: id.to_string(),
        reason,
    };
    let columns: Vec<usize> = header
        .split(',')
        .map(|name| {
            let name = name.trim().trim_matches('"');
            LEAD_NAMES
                .iter()
                .position(|l| l.eq_ignore_ascii_case(name))
                .ok_or_else(|| bad(format!("unknown lead column {name:?}")))
        })
        .collect::<Result<_>>()?;
    let mut seen = columns.clone();
    seen.sort_unstable();
    seen.dedup();
    if columns.len() != N_LEADS || seen.len() != N_LEADS {
        return Err(bad(format!(
            "expected {N_LEADS} distinct lead columns, got {}",
            columns.len()
        )));
    }
    let mut leads: Vec<Vec<f32>> = vec![Vec::new(); N_LEADS];
    for (row, line) in lines.enumerate() {
        let values: Vec<&str> = line.split(',').collect();
        if values.len() != N_LEADS {
            return Err(format_err(
                path,
                format!("row {} has {} fields", row + 2, values.len()),
            ));
        }
        for (&lead, v) in columns.iter().zip(values) {
            let v: f32 = v
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("row {}: cannot parse {v:?}", row + 2)))?;
            leads[lead].push(v);
        }
    }
    let len = leads[0].len();
    Tensor::new(vec![N_LEADS, len], leads.concat())
}

/// Writes `ds` as a manifest plus one binary file per record. Refuses to
/// replace an existing dataset unless `force` is set.
pub fn save_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    ds.validate()?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() && !force {
        return Err(format_err(
            dir,
            "a dataset already exists here (use force to overwrite)",
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut class_counts = BTreeMap::new();
    let mut records = Vec::with_capacity(ds.len());
    for (i, r) in ds.records.iter().enumerate() {
        if !safe_id(&r.id) {
            return Err(Error::InvalidRecord {
                record_id: r.id.clone(),
                reason: "ids may only contain ASCII letters, digits, '_', '-' and '.'".into(),
            });
        }
        let file = format!("{}.ecg", r.id);
        write_record_file(&dir.join(&file), &r.signal)?;
        if let Some(l) = r.labels {
            *class_counts.entry(l.rhythm.to_string()).or_insert(0) += 1;
            *class_counts
                .entry(format!("{:?}", l.gender).to_lowercase())
                .or_insert(0) += 1;
        }
        records.push(ManifestRecord {
            id: r.id.clone(),
            file,
            rhythm: r.labels.map(|l| l.rhythm),
            gender: r.labels.map(|l| l.gender),
            split: ds.splits.as_ref().map(|s| s[i]),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        sampling_rate_hz: ds.sampling_rate_hz().unwrap_or(0.0),
        length: ds.signal_len().unwrap_or(0),
        lead_order: LEAD_NAMES.iter().map(|s| s.to_string()).collect(),
        normalization: Normalization::Zscore,
        provenance: ds.provenance.clone(),
        class_counts,
        records,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

/// Loads and validates a dataset directory. Raw (`"none"`) data is z-scored
/// per lead; nothing is returned unless every record loads.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| format_err(&manifest_path, format!("malformed manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(format_err(
            &manifest_path,
            format!("format {:?} is not {FORMAT:?}", manifest.format),
        ));
    }
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(format_err(
            &manifest_path,
            format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            ),
        ));
    }
    if manifest.lead_order != LEAD_NAMES {
        return Err(format_err(
            &manifest_path,
            format!("lead order must be {LEAD_NAMES:?}"),
        ));
    }

    let mut records = Vec::with_capacity(manifest.records.len());
    let mut splits = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let path: PathBuf = dir.join(&entry.file);
        let mut signal = if entry.file.ends_with(".csv") {
            read_csv_record(&path, &entry.id)?
        } else {
            read_record_file(&path)?
        };
        if signal.shape()[0] != N_LEADS {
            return Err(Error::InvalidRecord {
                record_id: entry.id.clone(),
                reason: format!("expected {N_LEADS} leads, got {}", signal.shape()[0]),
            });
        }
        if signal.shape()[1] != manifest.length {
            return Err(Error::InvalidRecord {
                record_id: entry.id.clone(),
                reason: format!(
                    "length {} differs from the manifest's {}",
                    signal.shape()[1],
                    manifest.length
                ),
            });
        }
        let labels = match (entry.rhythm, entry.gender) {
            (Some(rhythm), Some(gender)) => Some(Labels { rhythm, gender }),
            (None, None) => None,
            _ => {
                return Err(Error::InvalidRecord {
                    record_id: entry.id.clone(),
                    reason: "rhythm and gender labels must be given together".into(),
                })
            }
        };
        let record = SignalRecord {
            id: entry.id.clone(),
            signal: signal.clone(),
            sampling_rate_hz: manifest.sampling_rate_hz,
            labels,
        };
        record.validate()?;
        if manifest.normalization == Normalization::None {
            zscore(&mut signal);
        }
        records.push(SignalRecord { signal, ..record });
        splits.push(entry.split);
    }
    let splits = if splits.iter().all(Option::is_some) && !splits.is_empty() {
        Some(splits.into_iter().map(|s| s.expect("checked")).collect())
    } else if splits.iter().all(Option::is_none) {
        None
    } else {
        return Err(format_err(
            &manifest_path,
            "either every record or none must carry a split tag",
        ));
    };
    let mut ds = Dataset::new(records, manifest.provenance)?;
    ds.splits = splits;
    Ok(ds)
}
