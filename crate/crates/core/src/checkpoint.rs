//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `"HRTK"`, `u32` version, `u32` length + config text, `u64` step, `u32` tensor
//! count, then per tensor `u32` name length, name, `u8` dtype tag, `u32` rank,
//! `u64` extents and the `f64` payload.

use std::path::Path;

use hrtnet_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{check_layout, ModelState};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"HRTK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * state.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = state.config.canonical_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (name, t) in state.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Parses a checkpoint and checks its tensors against its own config.
pub fn decode(buf: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let text = r.string("config")?;
    let config = ModelConfig::from_canonical_text(&text).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    let step = r.u64("step")?;
    let count = r.u32("tensor count")? as usize;
    let mut params = ParamStore::new();
    for i in 0..count {
        let name = r.string(&format!("name of tensor {i}"))?;
        let tag = r.take(1, &format!("dtype of {name}"))?[0];
        if tag != DTYPE_F64 {
            return Err(Error::Format(format!("unknown dtype tag {tag} for {name}")));
        }
        let rank = r.u32(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&format!("shape of {name}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?, &name)?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value in {name}")));
        }
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        params.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    check_layout(&config, &params)?;
    Ok(ModelState { config, params, step })
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Loads a checkpoint that must match `config` exactly.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    check_layout(config, &state.params)?;
    if &state.config != config {
        return Err(Error::KeyMismatch("checkpoint was written for a different config".into()));
    }
    Ok(state)
}
