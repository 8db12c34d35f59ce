//! Model checkpoints.
//!
//! A checkpoint is one line of JSON (the header) terminated by `\n`,
//! followed by the concatenated parameter tensors as little-endian `f32`.
//! Header offsets and lengths count `f32` elements from the start of the
//! payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vae::{ModelConfig, VaeModel};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Free-form run metadata (training settings, epoch, seed).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &VaeModel, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut payload = Vec::with_capacity(model.params.num_scalars() * 4);
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
        for &x in t.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config.clone(),
        meta,
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend(payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(VaeModel, CheckpointHeader)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() % 4 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f32 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let mut model = VaeModel::new(header.config.clone(), 0)
        .map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
    if header.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            model.params.len(),
            header.tensors.len()
        )));
    }
    let mut expected_total = 0;
    for entry in &header.tensors {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {:?}", entry.name)))?;
        let t = model.params.get_mut(id);
        if t.shape() != entry.shape.as_slice() || entry.len != t.numel() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?}: shape {:?} does not match model shape {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let end = entry.offset.checked_add(entry.len).filter(|&e| e <= values.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("tensor {:?} runs past the payload", entry.name)))?;
        t.data_mut().copy_from_slice(&values[entry.offset..end]);
        expected_total += entry.len;
    }
    if expected_total != values.len() {
        return Err(Error::Checkpoint(format!(
            "payload holds {} values, header describes {expected_total}",
            values.len()
        )));
    }
    Ok((model, header))
}

pub fn save(model: &VaeModel, meta: serde_json::Value, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(VaeModel, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
