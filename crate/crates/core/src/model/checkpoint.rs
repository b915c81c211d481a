//! Checkpoint files: one header line, a JSON manifest, then a flat
//! little-endian `f32` payload in manifest order.
//!
//! ```text
//! biolm-checkpoint 1 <manifest byte length>\n
//! {"version":1,"config":{..},"tensors":[{"name":..,"shape":..,"offset":..,"length":..}],..}
//! <payload>
//! ```
//!
//! Offsets and lengths count `f32` values, not bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{EncoderConfig, TaskHead, Weights};

const MAGIC: &str = "biolm-checkpoint";
const VERSION: u32 = 1;

/// Model weights plus training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: Weights<f32>,
    /// Optimizer steps taken along the whole provenance chain.
    pub step: u64,
    pub seed: u64,
    /// Ids of ancestor checkpoints and training runs, oldest first.
    pub provenance: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: EncoderConfig,
    head: Option<TaskHead>,
    step: u64,
    seed: u64,
    provenance: Vec<String>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Checkpoint {
            weights: Weights::init(config, seed)?,
            step: 0,
            seed,
            provenance: Vec::new(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.weights.config()
    }

    /// First 16 hex digits of the SHA-256 of the serialized file.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        hex::encode(&digest[..8])
    }

    /// Compatibility error unless the stored vocabulary size equals `vocab_len`.
    pub fn check_vocab(&self, vocab_len: usize) -> Result<()> {
        let expected = self.config().vocab_size;
        if expected != vocab_len {
            return Err(Error::Compatibility(format!(
                "checkpoint expects a vocabulary of {expected} tokens, tokenizer has {vocab_len}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .weights
            .specs()
            .iter()
            .zip(self.weights.tensors())
            .map(|(s, t)| {
                let e = TensorEntry {
                    name: s.name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    length: t.numel(),
                };
                offset += t.numel();
                e
            })
            .collect();
        let manifest = Manifest {
            version: VERSION,
            config: self.config().clone(),
            head: self.weights.head().cloned(),
            step: self.step,
            seed: self.seed,
            provenance: self.provenance.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = format!("{MAGIC} {VERSION} {}\n", json.len()).into_bytes();
        out.extend_from_slice(&json);
        out.reserve(offset * 4);
        for t in self.weights.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("header", "missing header line"))?;
        let header =
            std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format("header", "not UTF-8"))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(Error::format(
                "header",
                format!("expected `{MAGIC} <version> <length>`"),
            ));
        }
        let version: u32 = parts[1]
            .parse()
            .map_err(|_| Error::format("version", format!("`{}` is not a number", parts[1])))?;
        if version != VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let manifest_len: usize = parts[2]
            .parse()
            .map_err(|_| Error::format("header", format!("bad manifest length `{}`", parts[2])))?;
        let body = &bytes[nl + 1..];
        if body.len() < manifest_len {
            return Err(Error::format("manifest", "truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..manifest_len])
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        if manifest.version != VERSION {
            return Err(Error::format(
                "version",
                format!("manifest version {}", manifest.version),
            ));
        }
        let payload = &body[manifest_len..];

        let config = manifest.config;
        config
            .validate()
            .map_err(|e| Error::format("config", e.to_string()))?;
        let mut specs = super::encoder_inventory(&config);
        if let Some(h) = &manifest.head {
            specs.extend(h.inventory(config.hidden));
        }
        if specs.len() != manifest.tensors.len() {
            return Err(Error::format(
                "tensors",
                format!(
                    "{} entries, inventory needs {}",
                    manifest.tensors.len(),
                    specs.len()
                ),
            ));
        }
        let mut expected_offset = 0;
        for (i, (s, e)) in specs.iter().zip(&manifest.tensors).enumerate() {
            let field = |f: &str| format!("tensors[{i}].{f}");
            if s.name != e.name {
                return Err(Error::format(
                    field("name"),
                    format!("`{}`, expected `{}`", e.name, s.name),
                ));
            }
            if s.shape != e.shape {
                return Err(Error::format(
                    field("shape"),
                    format!("{:?}, expected {:?}", e.shape, s.shape),
                ));
            }
            if e.length != s.numel() {
                return Err(Error::format(
                    field("length"),
                    format!("{}, expected {}", e.length, s.numel()),
                ));
            }
            if e.offset != expected_offset {
                return Err(Error::format(
                    field("offset"),
                    format!("{}, expected {expected_offset}", e.offset),
                ));
            }
            expected_offset += e.length;
        }
        if payload.len() != expected_offset * 4 {
            return Err(Error::format(
                "payload",
                format!(
                    "{} bytes, manifest needs {}",
                    payload.len(),
                    expected_offset * 4
                ),
            ));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for e in &manifest.tensors {
            let raw = &payload[e.offset * 4..(e.offset + e.length) * 4];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Checkpoint {
            weights: Weights::from_tensors(config, manifest.head, tensors)?,
            step: manifest.step,
            seed: manifest.seed,
            provenance: manifest.provenance,
        })
    }
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    crate::io_util::write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
