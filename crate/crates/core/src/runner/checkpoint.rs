//! Binary "ULCK" checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ULCK" | u32 version
//! u32 vocab_size | u32 d_model | u32 n_layers | u32 n_heads | u32 max_seq_len | u64 seed
//! per tensor, in parameter order:
//!   u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] | f32 data[numel]
//! ```

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::model::{LMConfig, LMParams};
use crate::numcore::Tensor;

pub const MAGIC: [u8; 4] = *b"ULCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(params: &LMParams<f32>) -> Result<Vec<u8>> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + 4 * params.num_params());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    for (name, t) in params.tensors() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated { what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LMParams<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Version { found: version, supported: VERSION }.into());
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32("config")? as usize;
    }
    let config = LMConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        max_seq_len: dims[4],
        seed: r.u64("config")?,
    };
    config.validate().map_err(|e| FormatError::Malformed(format!("stored config is invalid: {e}")))?;
    let mut tensors = Vec::new();
    for (expected_name, expected_shape) in config.param_specs() {
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| FormatError::Malformed("tensor name is not utf-8".into()))?
            .to_string();
        if name != expected_name {
            return Err(FormatError::Malformed(format!("expected tensor `{expected_name}`, found `{name}`")).into());
        }
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(FormatError::Malformed(format!("tensor `{name}` has rank {rank}")).into());
        }
        let shape = (0..rank).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != expected_shape {
            return Err(FormatError::Shape { name, found: shape, expected: expected_shape }.into());
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    LMParams::from_tensors(config, tensors)
}

pub fn save_checkpoint(params: &LMParams<f32>, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<LMParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
