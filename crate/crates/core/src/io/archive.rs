//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SHE1" (0x53 0x48 0x45 0x31)
//! count      u32
//! entries    count times:
//!   name_len u16
//!   name     name_len bytes, UTF-8
//!   rank     u8
//!   dims     rank x u64
//!   payload  product(dims) x f32, row-major
//! ```
//!
//! Patch tensors have shape `[frames, layers, patches, dim]`; token tensors
//! `[layers, tokens, dim]`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SHE1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("[bad-magic] not a tensor archive (magic {0:02x?})")]
    BadMagic([u8; 4]),

    #[error("[truncated] file ends inside {0}")]
    Truncated(String),

    #[error("[duplicate-name] entry `{0}` appears twice")]
    DuplicateName(String),

    #[error("[shape-mismatch] entry `{name}`: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("[trailing-data] {0} bytes after the last entry")]
    TrailingData(usize),

    #[error("[invalid-name] entry {index}: {detail}")]
    InvalidName { index: usize, detail: String },

    #[error("[missing-entry] `{0}`")]
    MissingEntry(String),

    #[error("[io] file access failed")]
    Io(#[from] std::io::Error),
}

impl ArchiveError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ArchiveError::BadMagic(_) => "bad-magic",
            ArchiveError::Truncated(_) => "truncated",
            ArchiveError::DuplicateName(_) => "duplicate-name",
            ArchiveError::ShapeMismatch { .. } => "shape-mismatch",
            ArchiveError::TrailingData(_) => "trailing-data",
            ArchiveError::InvalidName { .. } => "invalid-name",
            ArchiveError::MissingEntry(_) => "missing-entry",
            ArchiveError::Io(_) => "io",
        }
    }
}

/// Every code `ArchiveError::code` can return.
pub const ERROR_CODES: [&str; 8] = [
    "bad-magic",
    "truncated",
    "duplicate-name",
    "shape-mismatch",
    "trailing-data",
    "invalid-name",
    "missing-entry",
    "io",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ArchiveError> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(ArchiveError::InvalidName {
                index: 0,
                detail: format!("name of {} bytes exceeds u16", name.len()),
            });
        }
        if shape.len() > u8::MAX as usize {
            return Err(ArchiveError::ShapeMismatch {
                name,
                detail: format!("rank {} exceeds u8", shape.len()),
            });
        }
        match element_count(&shape) {
            Some(n) if n == data.len() => Ok(Self { name, shape, data }),
            Some(n) => Err(ArchiveError::ShapeMismatch {
                name,
                detail: format!("shape {shape:?} needs {n} values, payload has {}", data.len()),
            }),
            None => Err(ArchiveError::ShapeMismatch {
                name,
                detail: format!("shape {shape:?} overflows"),
            }),
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Ordered, uniquely named collection of `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<TensorEntry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: TensorEntry) -> Result<(), ArchiveError> {
        if self.get(&entry.name).is_some() {
            return Err(ArchiveError::DuplicateName(entry.name));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorEntry, ArchiveError> {
        self.get(name).ok_or_else(|| ArchiveError::MissingEntry(name.to_string()))
    }

    /// Replaces an existing entry in place, keeping its position.
    pub fn replace(&mut self, entry: TensorEntry) -> Result<(), ArchiveError> {
        let slot = self
            .entries
            .iter_mut()
            .find(|e| e.name == entry.name)
            .ok_or_else(|| ArchiveError::MissingEntry(entry.name.clone()))?;
        *slot = entry;
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|e| 2 + e.name.len() + 1 + 8 * e.shape.len() + 4 * e.data.len())
            .sum();
        let mut out = Vec::with_capacity(8 + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = match r.take(4, "magic") {
            Ok(m) => m.try_into().expect("4 bytes"),
            Err(_) => {
                let mut m = [0u8; 4];
                m[..bytes.len()].copy_from_slice(bytes);
                return Err(ArchiveError::BadMagic(m));
            }
        };
        if magic != MAGIC {
            return Err(ArchiveError::BadMagic(magic));
        }
        let count = r.u32("entry count")? as usize;
        let mut names = HashSet::new();
        let mut entries = Vec::with_capacity(count.min(1024));
        for index in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| ArchiveError::InvalidName {
                    index,
                    detail: e.to_string(),
                })?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(ArchiveError::DuplicateName(name));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64("dims")?;
                let d = usize::try_from(d).map_err(|_| ArchiveError::ShapeMismatch {
                    name: name.clone(),
                    detail: format!("dimension {d} does not fit in memory"),
                })?;
                shape.push(d);
            }
            let bytes_needed = element_count(&shape)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| ArchiveError::ShapeMismatch {
                    name: name.clone(),
                    detail: format!("shape {shape:?} overflows"),
                })?;
            let raw = r.take(bytes_needed, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(TensorEntry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(ArchiveError::TrailingData(bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ArchiveError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ArchiveError::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, ArchiveError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
