//! Versioned binary checkpoints.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32` length + UTF-8
//! JSON of the [`ModelConfig`], `u32` tensor count, then per tensor: `u32`
//! name length, UTF-8 name, `u32` rank, `u32` dims, row-major `f32` values.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};

pub const MAGIC: &[u8; 8] = b"TCRCKPT\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(config: &ModelConfig, params: &Parameters) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, Parameters)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    config.validate()?;

    let mut params = Parameters::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors, expected {}",
            expected.len()
        )));
    }
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        if &dims != shape {
            return Err(Error::Checkpoint(format!("{name}: shape {dims:?}, expected {shape:?}")));
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(4 * numel)?;
        values.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    params.for_each_mut(|i, mut t| {
        t.iter_mut().zip(&values[i]).for_each(|(d, &v)| *d = v);
    });
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok((config, params))
}

pub fn save(path: &Path, config: &ModelConfig, params: &Parameters) -> Result<()> {
    fs::write(path, to_bytes(config, params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, Parameters)> {
    from_bytes(&fs::read(path)?)
}

/// Fails with the name of the first field where `expected` and `found` differ.
pub fn ensure_compatible(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let a = serde_json::to_value(expected)?;
    let b = serde_json::to_value(found)?;
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (key, va) in a {
            if b.get(key) != Some(va) {
                return Err(Error::ConfigMismatch(key.clone()));
            }
        }
    }
    Ok(())
}
