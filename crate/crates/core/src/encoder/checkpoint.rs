//! Versioned binary model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u32` version, the config as a
//! length-prefixed JSON blob, then every model parameter as little-endian
//! `f64` in the order of [`Model::collect_params`].

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VXCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint.
pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Internal(format!("config serialization failed: {e}")))?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    let params = model.collect_params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a checkpoint and rebuilds the model.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data("bad checkpoint magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let mut long = [0u8; 8];
    r.read_exact(&mut long)?;
    let config_len = u64::from_le_bytes(long) as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::Data(format!("invalid checkpoint config: {e}")))?;
    let mut model = build_model(&config, 0)?;
    r.read_exact(&mut long)?;
    let count = u64::from_le_bytes(long) as usize;
    let mut values = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Data("trailing bytes after checkpoint parameters".into()));
    }
    model.assign_params(&values)?;
    Ok(model)
}

/// Writes a checkpoint file.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint file.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
