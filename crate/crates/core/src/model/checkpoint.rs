//! Checkpoint container.
//!
//! Layout: 8-byte magic `MTADAPT\0`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the tensor payloads as little-endian `f32`
//! in header order. Offsets in the header are relative to the payload start.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParameters};
use crate::autograd::Tensor;
use crate::corpus::write_file;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MTADAPT\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    length: usize,
}

/// Free-form provenance stored alongside the weights.
pub type CheckpointMeta = serde_json::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: CheckpointMeta,
}

pub fn checkpoint_bytes(params: &ModelParameters, metadata: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.names().len());
    let mut payload = Vec::with_capacity(params.num_parameters() * 4);
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let offset = payload.len();
        for &x in t.iter() {
            let f = x as f32;
            if f as f64 != x {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` holds a value not representable as f32: {x}"
                )));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            offset,
            length: payload.len() - offset,
        });
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        tensors: entries,
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(
    params: &ModelParameters,
    path: impl AsRef<Path>,
    metadata: &CheckpointMeta,
) -> Result<()> {
    write_file(path.as_ref(), &checkpoint_bytes(params, metadata)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelParameters, CheckpointMeta)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header.config.validate()?;
    let payload = &bytes[header_end..];
    let mut names = Vec::with_capacity(header.tensors.len());
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let [r, c] = e.shape;
        if e.length != r * c * 4 || e.offset + e.length > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has inconsistent extent",
                e.name
            )));
        }
        let data: Vec<f64> = payload[e.offset..e.offset + e.length]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(Tensor::from_shape_vec((r, c), data).expect("length checked"));
        names.push(e.name);
    }
    let reference = ModelParameters::init(&header.config, 0)?;
    let shapes_match = reference.names() == names.as_slice()
        && reference
            .tensors()
            .iter()
            .zip(&tensors)
            .all(|(a, b)| a.dim() == b.dim());
    if !shapes_match {
        return Err(bad("tensor names or shapes do not match the stored config"));
    }
    Ok((
        ModelParameters::from_parts(header.config, names, tensors),
        header.metadata,
    ))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParameters, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ModelParameters {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            ffn_dim: 16,
            dropout_rate: 0.1,
            max_seq_len: 16,
            vocab_size: 20,
        };
        ModelParameters::init(&config, 42).unwrap()
    }

    #[test]
    fn bit_exact_roundtrip() {
        let m = small();
        let meta = serde_json::json!({"seed": 42});
        let bytes = checkpoint_bytes(&m, &meta).unwrap();
        let (back, back_meta) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back_meta, meta);
        assert_eq!(checkpoint_bytes(&back, &back_meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = small();
        let mut bytes = checkpoint_bytes(&m, &serde_json::Value::Null).unwrap();
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 4]).is_err());
        bytes[0] = b'X';
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_non_f32_values() {
        let mut m = small();
        m.tensors_mut()[0][[0, 0]] = 0.1;
        assert!(checkpoint_bytes(&m, &serde_json::Value::Null).is_err());
    }
}
