//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"RLCK"
//! version u32 (= 1)
//! config  u32 byte length, then UTF-8 JSON
//! count   u32 record count
//! record  name: u32 byte length + UTF-8 bytes
//!         rank: u32
//!         extents: u32 × rank
//!         payload: f32 little-endian × Π(extents)
//! ```
//!
//! Serialization is byte-exact: writing, reading and re-writing a container
//! reproduces identical bytes.

use crate::{Result, TensorError};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"RLCK";
pub const VERSION: u32 = 1;

/// One named dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub extents: Vec<u32>,
    pub payload: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, extents: Vec<u32>, payload: Vec<f32>) -> Result<Self> {
        let want: u64 = extents.iter().map(|&e| e as u64).product();
        if want != payload.len() as u64 {
            return Err(TensorError::Dimension {
                op: "checkpoint record",
                detail: format!("extents {extents:?} want {want} values, got {}", payload.len()),
            });
        }
        Ok(Record { name: name.into(), extents, payload })
    }
}

pub fn to_bytes(config_json: &str, records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.extents.len() as u32).to_le_bytes());
        for &e in &r.extents {
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in &r.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(TensorError::Format(format!(
                "truncated container: wanted {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|e| TensorError::Format(format!("invalid UTF-8 in container: {e}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(String, Vec<Record>)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Format("bad magic, not a parameter container".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(TensorError::Format(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let config = c.string()?;
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(c.u32()?);
        }
        let numel: u64 = extents.iter().map(|&e| e as u64).product();
        let payload = c.f32s(numel as usize)?;
        records.push(Record { name, extents, payload });
    }
    if c.at != bytes.len() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - c.at
        )));
    }
    Ok((config, records))
}

pub fn write_file(path: &Path, config_json: &str, records: &[Record]) -> Result<()> {
    std::fs::write(path, to_bytes(config_json, records))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(String, Vec<Record>)> {
    from_bytes(&std::fs::read(path)?)
}
