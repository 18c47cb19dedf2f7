//! Binary checkpoint format.
//!
//! ```text
//! "ATSC" | version u32 | config_len u32 | config JSON (keys sorted)
//!        | n_params u32
//!        | n_params x { name_len u32 | name | ndim u32 | dims u32.. | f32 data }
//!        | crc32 u32 over every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(String),
    #[error("not a checkpoint: expected magic {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Serializes the config as JSON text with keys in sorted order.
fn canonical_config(config: &ModelConfig) -> String {
    // serde_json's default map is ordered by key.
    let value = serde_json::to_value(config).expect("config serializes");
    serde_json::to_string(&value).expect("value serializes")
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.parameter_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = canonical_config(model.config());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses and verifies a checkpoint. Nothing is returned unless the whole
/// file is structurally complete and its checksum matches.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let json_len = c.u32("config length")? as usize;
    let json = c.take(json_len, "config")?;
    let n_params = c.u32("parameter count")? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name_len = c.u32("parameter name length")? as usize;
        let name = c.take(name_len, "parameter name")?;
        let name = std::str::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_owned();
        let ndim = c.u32("parameter rank")? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(CheckpointError::Malformed(format!("parameter {name} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("parameter shape")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| CheckpointError::Malformed(format!("parameter {name} has shape {shape:?}")))?;
        let raw = c.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("parameter data"))?, "parameter data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("parameter {name} appears twice")));
        }
    }
    let body_end = c.pos;
    let stored = c.u32("checksum")?;
    if c.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} unexpected trailing bytes",
            bytes.len() - c.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let config: ModelConfig = serde_json::from_slice(json)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    Model::from_parts(config, params).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
