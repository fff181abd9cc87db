//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PATCHAD\0"
//! version  u8       1
//! section  u16 length + UTF-8 bytes
//! count    u32      number of records
//! record   u16 name length + UTF-8 name
//!          u8  frozen flag (0 or 1)
//!          u8  ndim, then ndim × u64 dimension sizes
//!          product(dims) × f64 values
//! ```
//!
//! Records are written in name order, so equal stores encode to equal bytes.

use std::path::Path;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PATCHAD\0";
pub const VERSION: u8 = 1;

pub fn encode(store: &ParameterStore, section: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_str(&mut out, section);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        put_str(&mut out, name);
        out.push(p.frozen as u8);
        out.push(p.value.ndim() as u8);
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Decodes a checkpoint, returning its section name and parameters.
pub fn decode(bytes: &[u8]) -> Result<(String, ParameterStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let section = r.string()?;
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Checkpoint(format!("bad frozen flag {f} for {name}"))),
        };
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?, frozen);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok((section, store))
}

pub fn save(store: &ParameterStore, section: &str, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store, section)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks that it belongs to `section`.
pub fn load(path: &Path, section: &str) -> Result<ParameterStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (found, store) = decode(&bytes)?;
    if found != section {
        return Err(Error::Checkpoint(format!(
            "{} holds section {found:?}, expected {section:?}",
            path.display()
        )));
    }
    Ok(store)
}
