//! Binary checkpoint: magic, version, JSON header, raw little-endian f64s.
//!
//! The header carries the model configuration, channel order, normalisation
//! statistics, training history and an index of every parameter tensor.

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{CrossformerModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::EpochRecord;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"XALARMCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub best_epoch: usize,
    /// Validation MSE of the stored parameters on normalised data.
    pub best_val_mse: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: CrossformerModel,
    pub stats: NormStats,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stats: NormStats,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save(path: &Path, model: &CrossformerModel, stats: &NormStats, meta: &CheckpointMeta) -> Result<()> {
    if stats.channels.len() != model.config.channels {
        return Err(Error::Config(format!(
            "{} normalisation channels for a {}-channel model",
            stats.channels.len(),
            model.config.channels
        )));
    }
    let header = Header {
        config: model.config.clone(),
        stats: stats.clone(),
        meta: meta.clone(),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + model.params.num_scalars() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, format!("bad header: {e}")))?;

    let mut model = CrossformerModel::new(header.config, 0).map_err(|e| Error::format(path, e.to_string()))?;
    if header.tensors.len() != model.params.len() {
        return Err(Error::format(
            path,
            format!("{} tensors stored, architecture has {}", header.tensors.len(), model.params.len()),
        ));
    }
    let mut offset = 16 + hlen;
    for entry in header.tensors {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| Error::format(path, format!("unknown tensor '{}'", entry.name)))?;
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * 8)
            .ok_or_else(|| Error::format(path, format!("truncated data for '{}'", entry.name)))?;
        offset += n * 8;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(entry.shape, data)?;
        model.params.set(id, t).map_err(|e| Error::format(path, format!("'{}': {e}", entry.name)))?;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        model,
        stats: header.stats,
        meta: header.meta,
    })
}
