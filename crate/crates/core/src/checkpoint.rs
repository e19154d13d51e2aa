//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AMCK"  u32 schema_version  u32 header_len  header (JSON)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 rank  u32 dims[rank]  f32 values[]
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Tensor names carry a network prefix: `encoder.`, `projector.` or
//! `generator.`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Encoder, EncoderConfig, MaskGenerator, MaskGeneratorConfig, Projector};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AMCK";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    /// Absent for baseline augmentations.
    pub generator: Option<MaskGeneratorConfig>,
    /// Name of the pretraining augmentation, `"none"` for an untrained encoder.
    pub augmentation: String,
    pub seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    /// Dataset container version the models were trained on.
    pub dataset_schema_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub encoder: Encoder,
    pub projector: Projector,
    pub generator: Option<MaskGenerator>,
}

impl Checkpoint {
    fn sets(&self) -> Vec<(&'static str, &ParameterSet)> {
        let mut sets = vec![
            ("encoder", &self.encoder.params),
            ("projector", &self.projector.params),
        ];
        if let Some(g) = &self.generator {
            sets.push(("generator", &g.params));
        }
        sets
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, CHECKPOINT_SCHEMA_VERSION);
        push_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        let sets = self.sets();
        let count: usize = sets.iter().map(|(_, s)| s.named_tensors().count()).sum();
        push_u32(&mut out, count as u32);
        for (prefix, set) in sets {
            for (name, t) in set.named_tensors() {
                let full = format!("{prefix}.{name}");
                push_u32(&mut out, full.len() as u32);
                out.extend_from_slice(full.as_bytes());
                push_u32(&mut out, t.rank() as u32);
                for &d in t.shape() {
                    push_u32(&mut out, d as u32);
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        push_u32(&mut out, crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint(reason);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing AMCK header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!("CRC mismatch (stored {stored:08x}, computed {actual:08x}); file is corrupt or truncated")));
        }
        let mut r = Reader { bytes: body, at: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(bad(format!(
                "checkpoint schema version {version} is not supported (this build reads version {CHECKPOINT_SCHEMA_VERSION})"
            )));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;

        // Build models of the right shape, then overwrite every tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ck = Checkpoint {
            encoder: Encoder::new(header.encoder.clone(), &mut rng)?,
            projector: Projector::new(&header.encoder, &mut rng)?,
            generator: header
                .generator
                .clone()
                .map(|c| MaskGenerator::new(c, &mut rng))
                .transpose()?,
            header,
        };
        let expected: usize = ck
            .sets()
            .iter()
            .map(|(_, s)| s.named_tensors().count())
            .sum();
        let count = r.u32()? as usize;
        if count != expected {
            return Err(bad(format!(
                "{count} tensors stored, the configured models have {expected}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(
                    n.checked_mul(4)
                        .ok_or_else(|| bad("tensor size overflows".into()))?,
                )?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            let (prefix, local) = name
                .split_once('.')
                .ok_or_else(|| bad(format!("tensor name {name} has no prefix")))?;
            let set = match prefix {
                "encoder" => &mut ck.encoder.params,
                "projector" => &mut ck.projector.params,
                "generator" => match &mut ck.generator {
                    Some(g) => &mut g.params,
                    None => {
                        return Err(bad(format!(
                            "{name} stored but no mask generator is configured"
                        )))
                    }
                },
                _ => return Err(bad(format!("unknown network prefix in {name}"))),
            };
            set.assign(local, tensor)
                .map_err(|e| bad(format!("{name}: {e}")))?;
            if !seen.insert(name.clone()) {
                return Err(bad(format!("tensor {name} stored twice")));
            }
        }
        if r.at != body.len() {
            return Err(bad(format!(
                "{} unexpected trailing bytes",
                body.len() - r.at
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
