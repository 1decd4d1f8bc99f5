//! Checkpoint file format.
//!
//! Layout: magic `EVLV`, format version `u32` LE, a length-prefixed JSON
//! [`ModelConfig`], then each named parameter tensor as
//! `(name, shape, little-endian f32 data)` in model layout order. Writing
//! and re-reading a checkpoint is bit-exact at the stored precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError, Param};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"EVLV";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config error: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(model.config())?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.data.iter() {
            w.write_all(&v.to_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Malformed("unexpected end of file".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Read only the config header.
pub fn load_checkpoint_config(path: &Path) -> Result<ModelConfig, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)
}

fn read_header(r: &mut impl Read) -> Result<ModelConfig, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let cfg_len = read_u64(r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    read_exact(r, &mut cfg_buf)?;
    Ok(serde_json::from_slice(&cfg_buf)?)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let config = read_header(&mut r)?;
    let n_params = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf)?;
            data.push(S::from_f32(f32::from_le_bytes(buf)));
        }
        let decay = shape.len() >= 2;
        params.push(Param {
            name,
            shape,
            data: Arc::new(data),
            decay,
        });
    }
    Ok(Model::from_params(config, params)?)
}
