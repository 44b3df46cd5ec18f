//! Checkpoint container.
//!
//! Layout: `CRKSEGCK` magic, `u32` format version, `u64` header length, a
//! JSON header (configuration, training state, tensor index), the tensor
//! payload as row-major little-endian `f32`, and a SHA-256 of everything
//! before it. Loading validates the whole file before building anything.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CrackSegmenter, ModelConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nnops::Tensor;
use crate::trainer::{AdamState, Moments, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CRKSEGCK";
const DIGEST_LEN: usize = 32;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CrackSegmenter,
    pub adam: AdamState,
    pub train: Option<TrainState>,
    pub run: Option<RunConfig>,
}

impl Checkpoint {
    pub fn inference(model: CrackSegmenter) -> Self {
        Self { model, adam: AdamState::default(), train: None, run: None }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_step: Option<u64>,
}

/// Seed and position of the data-order stream; every epoch's stream is
/// derived from these, so resuming at an epoch boundary replays exactly.
#[derive(Debug, Serialize, Deserialize)]
struct RngInfo {
    seed: u64,
    next_epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    run: Option<RunConfig>,
    train: Option<TrainState>,
    rng: Option<RngInfo>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let store = &ckpt.model.params;
    let mut payload: Vec<f32> = Vec::new();
    let mut tensors = Vec::new();
    for (_, e) in store.iter() {
        tensors.push(TensorEntry { name: e.name.clone(), kind: Kind::Param, shape: e.tensor.shape().to_vec(), offset: payload.len(), adam_step: None });
        payload.extend_from_slice(e.tensor.data());
    }
    for (&id, mo) in &ckpt.adam.moments {
        let e = store.entry(id);
        for (kind, data) in [(Kind::AdamM, &mo.m), (Kind::AdamV, &mo.v)] {
            tensors.push(TensorEntry {
                name: e.name.clone(),
                kind,
                shape: e.tensor.shape().to_vec(),
                offset: payload.len(),
                adam_step: Some(mo.step),
            });
            payload.extend_from_slice(data);
        }
    }
    let header = Header {
        model: ckpt.model.config().clone(),
        run: ckpt.run.clone(),
        train: ckpt.train.clone(),
        rng: ckpt.run.as_ref().zip(ckpt.train.as_ref()).map(|(r, t)| RngInfo { seed: r.train.seed, next_epoch: t.epoch }),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(24 + json.len() + payload.len() * 4 + DIGEST_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    // write-then-rename so an interrupted save never clobbers the old file
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic or too short)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("format version {version} is not supported (expected {CHECKPOINT_VERSION})")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch; the file is truncated or corrupt"));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let json = body.get(20..20 + hlen).ok_or_else(|| bad("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("malformed header: {e}")))?;
    let raw = &body[20 + hlen..];
    if raw.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let payload: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

    let mut model = CrackSegmenter::new(header.model.clone())?;
    let mut seen = vec![false; model.params.len()];
    let mut moments: BTreeMap<_, Moments> = BTreeMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload.get(t.offset..t.offset + n).ok_or_else(|| bad(format!("tensor {} lies outside the payload", t.name)))?;
        let id = model.params.id(&t.name).ok_or_else(|| bad(format!("unknown parameter {}", t.name)))?;
        if model.params.get(id).shape() != t.shape.as_slice() {
            return Err(bad(format!("parameter {} has shape {:?}, file has {:?}", t.name, model.params.get(id).shape(), t.shape)));
        }
        match t.kind {
            Kind::Param => {
                model.params.set(id, Tensor::from_vec(&t.shape, data.to_vec())?)?;
                seen[id.0] = true;
            }
            Kind::AdamM | Kind::AdamV => {
                let step = t.adam_step.ok_or_else(|| bad(format!("moment of {} lacks a step count", t.name)))?;
                let mo = moments.entry(id).or_insert_with(|| Moments { step, m: Vec::new(), v: Vec::new() });
                if t.kind == Kind::AdamM { mo.m = data.to_vec() } else { mo.v = data.to_vec() }
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bad(format!("parameter {} is missing", model.params.name(crate::nnops::ParamId(i)))));
    }
    if moments.values().any(|m| m.m.is_empty() || m.v.is_empty()) {
        return Err(bad("optimizer moments are incomplete"));
    }
    Ok(Checkpoint { model, adam: AdamState { moments }, train: header.train, run: header.run })
}
