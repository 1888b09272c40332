//! Binary checkpoint format (version 1, all integers little-endian):
//!
//! | bytes | content                                      |
//! |-------|----------------------------------------------|
//! | 4     | magic `CVSK`                                 |
//! | 4     | format version (`u32`)                       |
//! | 4     | config length `c` (`u32`)                    |
//! | c     | [`ModelConfig`] as UTF-8 JSON                |
//! | 8     | parameter count `n` (`u64`)                  |
//! | 8·n   | parameters as `f64`, in [`Params::names`] order, row-major |
//! | 32    | SHA-256 of every preceding byte              |
//!
//! Parameters are always stored as `f64` so f32 and f64 models share a format.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};
use crate::model::Transformer;
use crate::params::{ModelConfig, Params, Scalar};

pub const MAGIC: &[u8; 4] = b"CVSK";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &Transformer<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let flat = model.params.to_flat_f64();
    let mut buf = Vec::with_capacity(52 + config.len() + 8 * flat.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for x in flat {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(ModelError::Checkpoint("truncated file".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Transformer<T>> {
    if bytes.len() < 32 {
        return Err(ModelError::Checkpoint("truncated file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ModelError::Checkpoint("checksum mismatch".into()));
    }
    let mut cur = body;
    if take(&mut cur, 4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let clen = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut cur, clen)?)?;
    config.validate()?;
    let n = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
    if n != config.param_count() {
        return Err(ModelError::Checkpoint(format!("config implies {} parameters, header says {n}", config.param_count())));
    }
    let raw = take(&mut cur, 8 * n)?;
    if !cur.is_empty() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    let flat: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut params = Params::zeros(&config);
    params.load_flat_f64(&flat)?;
    Transformer::from_params(config, params)
}

pub fn save<T: Scalar>(model: &Transformer<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Transformer<T>> {
    from_bytes(&fs::read(path)?)
}
