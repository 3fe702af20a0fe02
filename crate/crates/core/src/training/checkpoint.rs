//! Versioned checkpoint archive: magic, version, a JSON manifest (tensor
//! names, shapes, byte offsets, step, config snapshot and hash), then raw
//! little-endian `f32` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NQCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: usize,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Adam step count per parameter, in store order.
    pub adam_steps: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: manifest plus tensors in manifest order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<Tensor>,
}

/// SHA-256 over the canonical JSON of every field that shapes the
/// trajectory (run bookkeeping such as paths and cadences excluded).
pub fn config_hash(cfg: &TrainConfig) -> String {
    let mut c = cfg.clone();
    c.manifest = None;
    c.checkpoint_every = 0;
    c.log_every = 0;
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &TrainConfig, model: &Model, opt: &AdamW, step: usize) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: &str, kind: TensorKind, t: &Tensor, tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for id in model.store.ids() {
        let name = model.store.name(id);
        push(name, TensorKind::Param, model.store.get(id), &mut tensors);
        push(name, TensorKind::AdamM, &opt.m[id.index()], &mut tensors);
        push(name, TensorKind::AdamV, &opt.v[id.index()], &mut tensors);
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        step,
        config: cfg.clone(),
        config_hash: config_hash(cfg),
        adam_steps: opt.t.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&payload);
    // Write-then-rename so an interrupted save never clobbers the previous
    // checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(path.display().to_string()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = HEADER_LEN.saturating_add(json_len);
    if bytes.len() < payload_start {
        return Err(Error::Truncated {
            expected: payload_start,
            found: bytes.len(),
        });
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])?;
    let payload = &bytes[payload_start..];
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.offset + 4 * t.shape.iter().product::<usize>())
        .max()
        .unwrap_or(0);
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected: payload_start + expected,
            found: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::DimMismatch {
            expected: payload_start + expected,
            found: bytes.len(),
        });
    }
    let tensors = manifest
        .tensors
        .iter()
        .map(|t| {
            let n: usize = t.shape.iter().product();
            let data = payload[t.offset..t.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(&t.shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    pub fn step(&self) -> usize {
        self.manifest.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.manifest.config
    }

    fn tensor(&self, name: &str, kind: TensorKind) -> Option<&Tensor> {
        self.manifest
            .tensors
            .iter()
            .position(|t| t.name == name && t.kind == kind)
            .map(|i| &self.tensors[i])
    }

    /// Rebuild the model from the stored config and overwrite every tensor.
    pub fn model(&self) -> Result<Model> {
        let cfg = self.config();
        let mut model = Model::new(&cfg.model_config(), cfg.seed)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let t = self
                .tensor(&name, TensorKind::Param)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// Optimizer state matching [`Checkpoint::model`].
    pub fn optimizer(&self, model: &Model) -> Result<AdamW> {
        let mut opt = AdamW::new(self.config().optimizer.clone(), &model.store);
        if self.manifest.adam_steps.len() != model.store.len() {
            return Err(Error::Invalid("optimizer state does not match the model".into()));
        }
        opt.t = self.manifest.adam_steps.clone();
        for id in model.store.ids() {
            let name = model.store.name(id);
            for (kind, slot) in [(TensorKind::AdamM, &mut opt.m), (TensorKind::AdamV, &mut opt.v)] {
                let t = self
                    .tensor(name, kind)
                    .ok_or_else(|| Error::Invalid(format!("checkpoint lacks optimizer state for `{name}`")))?;
                slot[id.index()] = t.clone();
            }
        }
        Ok(opt)
    }
}
