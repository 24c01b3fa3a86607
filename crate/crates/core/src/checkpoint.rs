//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RSNCKPT\0" | version u32 | kind: u32 len + utf8
//! | hyperparameter count u32 | per entry: u32 len + key, u32 len + JSON value
//! | parameter count u32 | per parameter: u32 len + name, u32 rank, u64 dims, f64 values
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::params::ParamStore;
use crate::reasonet::{ModelConfig, ModelKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RSNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the architecture: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn encode(config: &ModelConfig, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, config.kind.as_str().as_bytes());
    let table = match serde_json::to_value(config) {
        Ok(serde_json::Value::Object(map)) => map,
        _ => unreachable!("model config serializes to an object"),
    };
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (key, value) in &table {
        put_bytes(&mut out, key.as_bytes());
        put_bytes(&mut out, value.to_string().as_bytes());
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let kind: ModelKind = r.string()?.parse().map_err(CheckpointError::Malformed)?;
    let entries = r.u32()?;
    let mut table = serde_json::Map::new();
    for _ in 0..entries {
        let key = r.string()?;
        let value = serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        table.insert(key, value);
    }
    let config: ModelConfig =
        serde_json::from_value(serde_json::Value::Object(table)).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if config.kind != kind {
        return Err(CheckpointError::Malformed(format!(
            "kind tag {kind} disagrees with hyperparameters ({})",
            config.kind
        )));
    }
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params.push((name, value));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, params })
}

/// Copies checkpoint values into `store`, which must have exactly the same
/// parameter names and shapes.
pub fn restore(store: &mut ParamStore, params: &[(String, Tensor)]) -> Result<()> {
    if params.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint has {} parameters, model has {}",
            params.len(),
            store.len()
        )));
    }
    for (name, value) in params {
        let id = store
            .find(name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {name}")))?;
        let p = store.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: shape {:?} vs {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value.clone();
    }
    Ok(())
}

/// Lowercase hex SHA-256 of the encoded bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the checkpoint and returns its content hash.
pub fn save(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<String> {
    let bytes = encode(config, params);
    std::fs::write(path, &bytes)?;
    Ok(content_hash(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
