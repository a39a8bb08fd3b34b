//! Binary checkpoint files: header, config, then named f32 parameter arrays.
//!
//! Layout (little endian):
//! `"TBCK" | u32 version | [u8; 32] config digest | u32 len | config JSON |
//! u32 count | count x (u32 len | name | u32 ndim | ndim x u32 | f32 data)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};

use super::{EncoderConfig, TriModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TBCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_digest: [u8; 32],
    pub config: EncoderConfig,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn save_checkpoint(model: &TriModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut w, VERSION)?;
    w.write_all(&model.config.digest())?;
    let json = model.config.to_json();
    put_u32(&mut w, json.len() as u32)?;
    w.write_all(json.as_bytes())?;
    let host = model.params.to_host()?;
    put_u32(&mut w, host.len() as u32)?;
    for (name, (dims, values)) in host {
        put_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, dims.len() as u32)?;
        for d in dims {
            put_u32(&mut w, d as u32)?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<CheckpointHeader> {
    let magic = get_bytes(r, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut config_digest = [0u8; 32];
    r.read_exact(&mut config_digest)?;
    let len = get_u32(r)? as usize;
    let config: EncoderConfig = serde_json::from_slice(&get_bytes(r, len)?)?;
    if config.digest() != config_digest {
        return Err(Error::DigestMismatch {
            expected: hex::encode(config_digest),
            found: hex::encode(config.digest()),
        });
    }
    Ok(CheckpointHeader {
        version,
        config_digest,
        config,
    })
}

pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    read_header(&mut BufReader::new(open(path.as_ref())?))
}

fn open(path: &Path) -> Result<File> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(File::open(path)?)
}

fn read_params(r: &mut impl Read, model: &TriModel) -> Result<()> {
    let count = get_u32(r)? as usize;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, model has {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = get_u32(r)? as usize;
        let dims = (0..ndim).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = get_bytes(r, n * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(values, dims, &model.device)?;
        model.params.assign(&name, &t)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(())
}

/// Builds a model from a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TriModel> {
    let mut r = BufReader::new(open(path.as_ref())?);
    let header = read_header(&mut r)?;
    let model = TriModel::with_dtype(&header.config, 0, DType::F32)?;
    read_params(&mut r, &model)?;
    Ok(model)
}

impl TriModel {
    /// Overwrites this model's parameters from a checkpoint with the same config.
    pub fn load_params(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut r = BufReader::new(open(path.as_ref())?);
        let header = read_header(&mut r)?;
        if header.config_digest != self.config.digest() {
            return Err(Error::DigestMismatch {
                expected: hex::encode(self.config.digest()),
                found: hex::encode(header.config_digest),
            });
        }
        read_params(&mut r, self)
    }
}
