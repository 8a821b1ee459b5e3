//! Trained-model files: a JSON header followed by a float32 payload.
//!
//! Layout: `SMCK`, u32 version, u64 header length, header JSON, then every
//! tensor's little-endian f32 values back to back in header-index order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{build_model, Model, ModelSpec};
use super::tensor::Tensor;
use super::train::TrainConfig;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub train_config: TrainConfig,
    pub best_epoch: usize,
    pub train_loss_history: Vec<f64>,
    pub val_loss_history: Vec<f64>,
    /// Hash of the spec and training configuration, or of a caller-supplied
    /// run configuration.
    pub config_hash: String,
    /// Trials the weights were fitted on; evaluation refuses to score them.
    pub train_ids: Vec<String>,
    /// Free-form metadata attached by callers.
    #[serde(default)]
    pub meta: serde_json::Value,
    #[serde(skip)]
    pub weights: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    checkpoint: Checkpoint,
    tensors: Vec<TensorEntry>,
}

pub fn hash_config(spec: &ModelSpec, cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(spec, cfg)).expect("serializable config");
    hex::encode(Sha256::digest(json))
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        train_config: TrainConfig,
        best_epoch: usize,
        train_loss_history: Vec<f64>,
        val_loss_history: Vec<f64>,
        train_ids: Vec<String>,
    ) -> Self {
        Self {
            config_hash: hash_config(&model.spec, &train_config),
            spec: model.spec.clone(),
            train_config,
            best_epoch,
            train_loss_history,
            val_loss_history,
            train_ids,
            meta: serde_json::Value::Null,
            weights: model.state(),
        }
    }

    /// Rebuilds the network and loads the stored weights.
    pub fn model(&self) -> Result<Model> {
        let mut model = build_model(&self.spec, 0)?;
        model.load_state(&self.weights)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .weights
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            checkpoint: self.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.weights {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];
        let mut checkpoint = header.checkpoint;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let lo = e.offset * 4;
            let hi = lo + n * 4;
            if hi > payload.len() {
                return Err(Error::Format(format!("tensor {} runs past the payload", e.name)));
            }
            let data = payload[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            checkpoint.weights.push((e.name, Tensor::new(e.shape, data)));
        }
        Ok(checkpoint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
