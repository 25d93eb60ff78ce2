//! Immutable model copies and the on-disk checkpoint container.
//!
//! A container is `MFCLCKPT`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header and then every tensor as little-endian
//! `f64` in header order. The header names each section's architecture,
//! task/round metadata and tensor layout, so files are self-describing.

use std::fs;
use std::path::Path;

use mfcl_grad::nn::{Layer, ParamKind, ParamStore};
use mfcl_grad::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GeneratorNet, GlobalClassifier};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MFCLCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Classifier {
        arch: String,
        input_shape: [usize; 3],
        feature_dim: usize,
        num_classes: usize,
        task_tag: usize,
        extractor: Vec<Layer>,
    },
    Generator {
        preset: String,
        z_dim: usize,
        output_shape: [usize; 3],
        layers: Vec<Layer>,
    },
}

/// Parameter copy of a classifier or generator plus where it was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub task: usize,
    pub round: usize,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    task: usize,
    round: usize,
    spec: ModelSpec,
    entries: Vec<EntryHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    sections: Vec<SectionHeader>,
}

/// Named snapshots plus free-form metadata, as stored in one container.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub meta: serde_json::Value,
    pub sections: Vec<(String, ModelSnapshot)>,
}

impl Bundle {
    pub fn get(&self, name: &str) -> Option<&ModelSnapshot> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            sections: self
                .sections
                .iter()
                .map(|(name, s)| SectionHeader {
                    name: name.clone(),
                    task: s.task,
                    round: s.round,
                    spec: s.spec.clone(),
                    entries: s
                        .params
                        .iter()
                        .map(|p| EntryHeader {
                            name: p.name.clone(),
                            kind: p.kind,
                            shape: p.tensor.shape().to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.sections.iter().map(|(_, s)| s.params.numel()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, s) in &self.sections {
            for p in s.params.iter() {
                for v in p.tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing MFCLCKPT magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut cursor = 20 + len;
        let mut sections = Vec::with_capacity(header.sections.len());
        for sec in header.sections {
            let mut params = ParamStore::new();
            for e in sec.entries {
                let n: usize = e.shape.iter().product();
                let raw = bytes
                    .get(cursor..cursor + 8 * n)
                    .ok_or_else(|| Error::Checkpoint(format!("payload truncated in `{}`", e.name)))?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                params.insert(e.name, e.kind, Tensor::new(&e.shape, data));
                cursor += 8 * n;
            }
            sections.push((
                sec.name,
                ModelSnapshot {
                    spec: sec.spec,
                    params,
                    task: sec.task,
                    round: sec.round,
                },
            ));
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Bundle {
            meta: header.meta,
            sections,
        })
    }

    /// Writes through a temporary file and a rename, so readers never see a
    /// partial container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

impl ModelSnapshot {
    fn single(&self) -> Bundle {
        Bundle {
            meta: serde_json::Value::Null,
            sections: vec![("model".into(), self.clone())],
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        self.single().encode().expect("snapshot headers always serialize")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut bundle = Bundle::decode(bytes)?;
        if bundle.sections.len() != 1 {
            return Err(Error::Checkpoint(format!("expected one model, found {}", bundle.sections.len())));
        }
        Ok(bundle.sections.remove(0).1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.single().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Hex SHA-256 of the encoded snapshot.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

impl GlobalClassifier {
    pub fn snapshot(&self, task: usize, round: usize) -> ModelSnapshot {
        ModelSnapshot {
            spec: ModelSpec::Classifier {
                arch: self.arch.clone(),
                input_shape: self.input_shape,
                feature_dim: self.feature_dim,
                num_classes: self.num_classes(),
                task_tag: self.task_tag,
                extractor: self.extractor.clone(),
            },
            params: self.params.clone(),
            task,
            round,
        }
    }

    pub fn from_snapshot(s: &ModelSnapshot) -> Result<Self> {
        let ModelSpec::Classifier {
            arch,
            input_shape,
            feature_dim,
            task_tag,
            extractor,
            ..
        } = &s.spec
        else {
            return Err(Error::Checkpoint("snapshot holds a generator, not a classifier".into()));
        };
        Ok(Self {
            arch: arch.clone(),
            input_shape: *input_shape,
            feature_dim: *feature_dim,
            extractor: extractor.clone(),
            params: s.params.clone(),
            task_tag: *task_tag,
        })
    }

    /// Hash of the parameters and architecture, ignoring task/round tags.
    pub fn hash(&self) -> String {
        self.snapshot(0, 0).hash()
    }
}

impl GeneratorNet {
    pub fn snapshot(&self, task: usize, round: usize) -> ModelSnapshot {
        ModelSnapshot {
            spec: ModelSpec::Generator {
                preset: self.preset.clone(),
                z_dim: self.z_dim,
                output_shape: self.output_shape,
                layers: self.layers.clone(),
            },
            params: self.params.clone(),
            task,
            round,
        }
    }

    pub fn from_snapshot(s: &ModelSnapshot) -> Result<Self> {
        let ModelSpec::Generator {
            preset,
            z_dim,
            output_shape,
            layers,
        } = &s.spec
        else {
            return Err(Error::Checkpoint("snapshot holds a classifier, not a generator".into()));
        };
        Ok(Self {
            preset: preset.clone(),
            z_dim: *z_dim,
            output_shape: *output_shape,
            layers: layers.clone(),
            params: s.params.clone(),
        })
    }

    pub fn hash(&self) -> String {
        self.snapshot(0, 0).hash()
    }
}
