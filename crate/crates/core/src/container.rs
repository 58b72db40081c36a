//! Binary tensor container shared by checkpoints and bank exports.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "ALTC"
//! version  u32      CONTAINER_VERSION
//! kind     u32      1 = model checkpoint, 2 = feature bank
//! count    u32      number of entries
//! entry*   name_len u32, name (utf-8), ndims u32, dims u64 x ndims,
//!          data f64 x prod(dims)
//! ```
//!
//! Trailing bytes after the last entry are rejected.

use std::fs;
use std::path::Path;

use crate::error::{AltError, Result};

pub const MAGIC: &[u8; 4] = b"ALTC";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ContainerKind {
    Checkpoint = 1,
    Bank = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn scalars(name: impl Into<String>, values: &[f64]) -> Self {
        Entry::new(name, vec![values.len()], values.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(kind: ContainerKind) -> Self {
        Container {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, e: Entry) {
        self.entries.push(e);
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| AltError::Format(format!("missing entry `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for d in &e.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(AltError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(AltError::Version {
                found: version,
                expected: CONTAINER_VERSION,
            });
        }
        let kind = match r.u32()? {
            1 => ContainerKind::Checkpoint,
            2 => ContainerKind::Bank,
            k => return Err(AltError::Format(format!("unknown container kind {k}"))),
        };
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| AltError::Format("entry name is not utf-8".into()))?;
            let ndims = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndims.min(8));
            for _ in 0..ndims {
                dims.push(r.u64()? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| AltError::Format(format!("entry `{name}` too large")))?;
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| AltError::Format("overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(AltError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Container { kind, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(AltError::Format(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
