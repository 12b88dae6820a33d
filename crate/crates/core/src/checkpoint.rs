//! Single-file model checkpoints.
//!
//! Layout: 8-byte magic `SBSSLCKP`, `u32` format version, `u64` metadata
//! length, UTF-8 JSON metadata, then the raw little-endian `f64` buffers of
//! every tensor listed in the metadata, in listed order. Optimiser moments
//! are stored as tensors named `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncoderConfig, ModelState};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SBSSLCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint architecture {found} does not match configured {expected}")]
    Architecture { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"pretrain"` or `"finetune"`.
    pub kind: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub model: EncoderConfig,
    /// Resolved run configuration, embedded verbatim.
    pub config: serde_json::Value,
    /// Per-epoch log rows accumulated so far.
    pub log: serde_json::Value,
    pub adam_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        epoch: usize,
        seed: u64,
        model: &ModelState,
        adam: Option<&AdamState>,
        config: serde_json::Value,
        log: serde_json::Value,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: kind.to_string(),
                epoch,
                seed,
                model: model.config.clone(),
                config,
                log,
                adam_step: adam.map(|a| a.step),
                tensors: Vec::new(),
            },
            params: model.params.clone(),
            adam: adam.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        let mut buffers: Vec<&Tensor> = Vec::new();
        meta.tensors.clear();
        for p in self.params.iter() {
            meta.tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                decay: p.decay,
            });
            buffers.push(&p.value);
        }
        if let Some(adam) = &self.adam {
            meta.adam_step = Some(adam.step);
            for (tag, moments) in [("m", &adam.m), ("v", &adam.v)] {
                for (p, t) in self.params.iter().zip(moments) {
                    meta.tensors.push(TensorEntry {
                        name: format!("adam.{tag}.{}", p.name),
                        shape: t.shape().to_vec(),
                        decay: false,
                    });
                    buffers.push(t);
                }
            }
        }
        let json = serde_json::to_vec(&meta).expect("metadata serialises");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * buffers.iter().map(|t| t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in buffers {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(20..20 + meta_len)
            .ok_or_else(|| CheckpointError::Corrupt("metadata truncated".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;

        let mut offset = 20 + meta_len;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for entry in &meta.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {} truncated", entry.name)))?;
            offset += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).expect("length checked");
            if let Some(name) = entry.name.strip_prefix("adam.m.") {
                m.push((name.to_string(), t));
            } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
                v.push((name.to_string(), t));
            } else {
                params.insert(entry.name.clone(), t, entry.decay);
            }
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - offset
            )));
        }
        let adam = match meta.adam_step {
            Some(step) if !m.is_empty() => {
                let in_order = |moments: &[(String, Tensor)]| {
                    moments.len() == params.len()
                        && moments.iter().zip(params.iter()).all(|((n, t), p)| *n == p.name && t.shape() == p.value.shape())
                };
                if !in_order(&m) || !in_order(&v) {
                    return Err(CheckpointError::Corrupt("optimiser moments do not match parameters".into()));
                }
                Some(AdamState {
                    step,
                    m: m.into_iter().map(|(_, t)| t).collect(),
                    v: v.into_iter().map(|(_, t)| t).collect(),
                })
            }
            _ => None,
        };
        Ok(Self { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuild the model, with exactly the components present in the file.
    pub fn model(&self) -> Result<ModelState, CheckpointError> {
        let with_decoder = self.params.find("decoder.deconv.weight").is_some();
        let with_head = self.params.find("head.out.weight").is_some();
        let mut rng = crate::rng::derive(0, &[]);
        let mut model = ModelState::new(self.meta.model.clone(), with_decoder, with_head, &mut rng);
        let copied = model.load_matching(&self.params);
        if copied != model.params.len() || copied != self.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{copied} of {} stored parameters match the recorded architecture",
                self.params.len()
            )));
        }
        Ok(model)
    }

    /// Fail unless the stored encoder architecture equals `expected`.
    pub fn check_architecture(&self, expected: &EncoderConfig) -> Result<(), CheckpointError> {
        if !same_architecture(&self.meta.model, expected) {
            return Err(CheckpointError::Architecture {
                expected: describe(expected),
                found: describe(&self.meta.model),
            });
        }
        Ok(())
    }
}

/// Equality of every shape-determining field.
pub fn same_architecture(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    (a.image_size, a.patch_size, a.channels, a.embed_dim, a.depth, a.heads, a.mlp_ratio)
        == (b.image_size, b.patch_size, b.channels, b.embed_dim, b.depth, b.heads, b.mlp_ratio)
}

fn describe(c: &EncoderConfig) -> String {
    format!(
        "K={} L={} h={} image={} p={} C={} mlp={}",
        c.embed_dim, c.depth, c.heads, c.image_size, c.patch_size, c.channels, c.mlp_ratio
    )
}
