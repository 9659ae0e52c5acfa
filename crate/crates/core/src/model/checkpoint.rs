//! Binary checkpoint format.
//!
//! ```text
//! "CLMT" | version u32 | config | train meta | layer count u32
//! | layer table: name, ndim u32, dims u32.., payload offset u64
//! | payload: f32 little-endian values, layers back to back
//! ```
//! Integers are little-endian; strings are a u32 byte length then UTF-8.

use std::fs;
use std::path::Path;

use super::{Layer, ModelConfig, ModelState, TrainMeta};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLMT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(m: &ModelState) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + m.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let c = &m.config;
    for v in [c.vocab_size, c.context_len, c.embed_dim, c.n_blocks, c.n_heads, c.ffn_dim] {
        put_u32(&mut out, v as u32);
    }
    out.extend_from_slice(&c.rng_seed.to_le_bytes());
    out.extend_from_slice(&(m.train_meta.steps_taken as u64).to_le_bytes());
    put_str(&mut out, &m.train_meta.corpus_id);
    put_str(&mut out, &m.train_meta.optimizer);
    put_u32(&mut out, m.layers.len() as u32);
    let mut offset = 0u64;
    for layer in &m.layers {
        put_str(&mut out, &layer.name);
        put_u32(&mut out, layer.shape.len() as u32);
        for &d in &layer.shape {
            put_u32(&mut out, d as u32);
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += layer.values.len() as u64 * 4;
    }
    for layer in &m.layers {
        for v in &layer.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(m: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(m))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelState> {
    load_bytes(&fs::read(path)?)
}

pub fn load_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        context_len: dims[1],
        embed_dim: dims[2],
        n_blocks: dims[3],
        n_heads: dims[4],
        ffn_dim: dims[5],
        rng_seed: r.u64()?,
    };
    let train_meta = TrainMeta {
        steps_taken: r.u64()? as usize,
        corpus_id: r.string()?,
        optimizer: r.string()?,
    };
    let n_layers = r.u32()? as usize;
    let mut table = Vec::with_capacity(n_layers.min(1024));
    let mut expected_offset = 0u64;
    for _ in 0..n_layers {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()?;
        if offset != expected_offset {
            return Err(Error::MalformedCheckpoint(format!("layer `{name}` at offset {offset}")));
        }
        let len: usize = shape.iter().product();
        expected_offset += len as u64 * 4;
        table.push((name, shape, len));
    }
    let mut layers = Vec::with_capacity(table.len());
    for (name, shape, len) in table {
        let raw = r.take(len * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        layers.push(Layer { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let state = ModelState { config, layers, train_meta };
    state.validate().map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    Ok(state)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        if end > self.buf.len() {
            return Err(Error::TruncatedFile);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::MalformedCheckpoint("non-UTF-8 string".into()))
    }
}
