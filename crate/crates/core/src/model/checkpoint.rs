//! Binary checkpoint: `CSIM` magic, version, a JSON config block, named
//! `f32` parameters, then a SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;

use super::{Model, ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSIM";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint integrity check failed: checksum mismatch")]
    Checksum,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint config block: {0}")]
    Config(String),
    #[error("checkpoint parameter `{name}`: {reason}")]
    Param { name: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CheckpointError {
    /// True for damage to the file itself rather than a content mismatch.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            CheckpointError::BadMagic | CheckpointError::Checksum | CheckpointError::Truncated
        )
    }
}

/// A decoded checkpoint: the model plus free-form metadata stored with it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    metadata: serde_json::Value,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(model: &Model, metadata: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        model: model.config().clone(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("config serializes");
    let mut out = Vec::with_capacity(64 + json.len() + 4 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params().iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(if bytes.starts_with(CHECKPOINT_MAGIC) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let json_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut model = Model::new(header.model, 0)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(CheckpointError::Config(format!(
            "{count} parameters stored, config defines {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Config("parameter name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let id = model.params().id(&name).ok_or_else(|| CheckpointError::Param {
            name: name.clone(),
            reason: "not defined by the config".into(),
        })?;
        let expected = model.params().get(id).value.shape().to_vec();
        if shape != expected {
            return Err(CheckpointError::Param {
                name,
                reason: format!("shape {shape:?}, config expects {expected:?}"),
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        model.params_mut().get_mut(id).value = Tensor::new(shape, data).expect("shape checked");
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Config("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    metadata: &serde_json::Value,
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(model, metadata))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    fn tiny(kind: ModelKind) -> Model {
        let cfg = ModelConfig {
            kind,
            d_model: 4,
            heads: 2,
            d_ff: 8,
            window_len: 8,
            subcarriers: 8,
            classes: 3,
            cnn_channels: 2,
            ..Default::default()
        };
        Model::new(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_preserves_f32_weights() {
        for kind in ModelKind::ALL {
            let mut m = tiny(kind);
            m.round_to_f32();
            let meta = serde_json::json!({"epochs": 3});
            let back = decode_checkpoint(&encode_checkpoint(&m, &meta)).unwrap();
            assert_eq!(back.model, m);
            assert_eq!(back.metadata, meta);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&tiny(ModelKind::Mlp), &serde_json::Value::Null);
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(CheckpointError::Checksum)));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Checksum)
        ));
        assert!(matches!(decode_checkpoint(b"nope"), Err(CheckpointError::BadMagic)));
        let mut wrong = bytes;
        wrong[0] = b'X';
        assert!(decode_checkpoint(&wrong).unwrap_err().is_integrity());
    }
}
