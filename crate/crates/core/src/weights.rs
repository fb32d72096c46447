//! `GDW1` binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GDW1"  u32 count
//! per entry, sorted by name:
//!   u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
//!   rank x u32 dims, prod(dims) x f32
//! ```
//!
//! Tensors are rank 4 in memory. Saving drops leading unit dimensions (down
//! to rank 1) and loading pads them back, so a `2x2` matrix is stored with
//! rank 2.

use std::fs;
use std::path::Path;

use crate::error::{Result, WeightFormatError};
use crate::params::ParamStore;
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"GDW1";
pub const DTYPE_F32: u8 = 0;

fn stored_rank(d: Dims) -> usize {
    let leading = d.iter().take(3).take_while(|&&x| x == 1).count();
    4 - leading
}

/// Canonical encoding of `store`.
pub fn save_weights(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    // ParamStore iterates in name order, which makes the encoding canonical
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(DTYPE_F32);
        let dims = t.dims();
        let rank = stored_rank(dims);
        out.push(rank as u8);
        for &d in &dims[4 - rank..] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(WeightFormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightFormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightFormatError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WeightFormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a weight file produced by [`save_weights`].
pub fn load_weights(bytes: &[u8]) -> Result<ParamStore, WeightFormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| WeightFormatError::BadMagic {
        found: bytes.to_vec(),
    })?;
    if magic != MAGIC {
        return Err(WeightFormatError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let offset = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| WeightFormatError::InvalidName { offset })?
            .to_string();
        let tag = r.u8()?;
        if tag != DTYPE_F32 {
            return Err(WeightFormatError::UnknownDtype { name, tag });
        }
        let rank = r.u8()?;
        if rank == 0 || rank > 4 {
            return Err(WeightFormatError::UnsupportedRank { name, rank });
        }
        let mut dims = [1usize; 4];
        for k in 4 - rank as usize..4 {
            dims[k] = r.u32()? as usize;
        }
        if dims.contains(&0) {
            return Err(WeightFormatError::ZeroDim { name });
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let payload_len = numel.and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX);
        let payload = r.take(payload_len)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if store.contains(&name) {
            return Err(WeightFormatError::DuplicateName(name));
        }
        store.insert(name, Tensor::from_parts(dims, data));
    }
    if r.pos != bytes.len() {
        return Err(WeightFormatError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(store)
}

pub fn save_file(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, save_weights(store))?;
    Ok(())
}

pub fn load_file(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    Ok(load_weights(&bytes)?)
}
