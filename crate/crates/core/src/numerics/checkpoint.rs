//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic        8 bytes   "G2TCKPT1"
//! config_hash  u64
//! step         u64
//! config_len   u32, followed by config_len bytes of UTF-8 config text
//! count        u32       number of arrays
//! per array:
//!   name_len   u32, followed by name_len bytes of UTF-8 name
//!   ndim       u32, followed by ndim x u32 dimensions
//!   data       product(dims) x f32
//! ```
//!
//! Values are stored as 32-bit floats, so loading then saving reproduces the
//! file byte for byte.

use std::io::{self, Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::params::ParamStore;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"G2TCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint text is not UTF-8")]
    BadUtf8,
    #[error("array `{name}` has inconsistent shape")]
    BadShape { name: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub config_text: String,
    pub arrays: Vec<(String, Tensor)>,
}

/// First eight bytes of the SHA-256 of `text`, little-endian.
pub fn config_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_text: &str, step: u64) -> Self {
        Self {
            config_hash: config_hash(config_text),
            step,
            config_text: config_text.to_string(),
            arrays: store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        write_bytes(w, self.config_text.as_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, t) in &self.arrays {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let config_hash = read_u64(r)?;
        let step = read_u64(r)?;
        let config_text = String::from_utf8(read_bytes(r)?).map_err(|_| CheckpointError::BadUtf8)?;
        let count = read_u32(r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?).map_err(|_| CheckpointError::BadUtf8)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|_| CheckpointError::BadShape { name: name.clone() })?;
            arrays.push((name, t));
        }
        Ok(Self { config_hash, step, config_text, arrays })
    }

    pub fn save(&self, path: &std::path::Path) -> io::Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let mut r = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    Ok(b)
}
