//! Checkpoint layout: an 8-byte little-endian header length, a UTF-8 JSON
//! header (format version, config, tensor manifest), then the raw
//! little-endian `f32` payload. Manifest offsets are byte offsets into the
//! payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, ModelConfig, ModelError};
use crate::numeric::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn to_bytes(model: &LanguageModel<f32>) -> Vec<u8> {
    let mut offset = 0;
    let tensors = model
        .names()
        .iter()
        .zip(model.params())
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len() * 4;
            e
        })
        .collect();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<LanguageModel<f32>, ModelError> {
    let corrupt = |m: &str| ModelError::CorruptCheckpoint(m.to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| corrupt("missing header length"))?.try_into().unwrap();
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length overflow"))?;
    let header_end = 8usize.checked_add(header_len).ok_or_else(|| corrupt("header length overflow"))?;
    let header_bytes = bytes.get(8..header_end).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| ModelError::CorruptCheckpoint(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[header_end..];
    let mut named = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0;
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if entry.offset != expected_offset {
            return Err(ModelError::CorruptCheckpoint(format!(
                "tensor {} at offset {}, expected {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let end = entry.offset + n * 4;
        let raw = payload
            .get(entry.offset..end)
            .ok_or_else(|| ModelError::CorruptCheckpoint(format!("payload truncated inside {}", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((entry.name, Tensor::new(entry.shape, data)?));
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    LanguageModel::from_parts(header.config, named)
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(model: &LanguageModel<f32>, path: &Path) -> Result<(), ModelError> {
    fs::write(path, to_bytes(model)).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<LanguageModel<f32>, ModelError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and rejects it unless its architecture equals `expected`
/// (the init seed is not compared).
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<LanguageModel<f32>, ModelError> {
    let model = load_checkpoint(path)?;
    let got = model.config();
    let same = ModelConfig {
        seed: expected.seed,
        ..got.clone()
    } == *expected;
    if !same {
        return Err(ModelError::ShapeMismatch(format!(
            "checkpoint has hidden {} / intermediate {} / bottleneck {:?} / layers {}, expected {} / {} / {:?} / {}",
            got.hidden,
            got.intermediate,
            got.bottleneck,
            got.layers,
            expected.hidden,
            expected.intermediate,
            expected.bottleneck,
            expected.layers
        )));
    }
    Ok(model)
}
