//! Named-array archive used for checkpoints and probability dumps.
//!
//! Layout, all integers little-endian:
//! `PSEGCKPT` | version u32 | metadata length u64 | metadata JSON |
//! entry count u32 | entries. An entry is name length u32, UTF-8 name,
//! rank u32, rank × u64 dims, then the f32 values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Array;

pub const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub entries: Vec<(String, Array<f32>)>,
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Archive { metadata, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array<f32>) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Array<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        let mut out = Vec::with_capacity(64 + meta.len() + self.entries.iter().map(|(_, a)| 4 * a.len() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, array) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(array.shape().len() as u32).to_le_bytes());
            for &d in array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in array.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(r.corrupt(0, "bad magic"));
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.corrupt(version_at, format!("unsupported version {version}")));
        }
        let meta_len = r.len_u64("metadata length")?;
        let meta_at = r.pos;
        let metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| r.corrupt(meta_at, format!("metadata: {e}")))?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.corrupt(name_at, "name is not UTF-8"))?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(r.corrupt(r.pos - 4, format!("rank {rank} of `{name}` is implausible")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_u64("dimension")?);
            }
            let data_at = r.pos;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.corrupt(data_at, format!("shape {shape:?} of `{name}` overflows")))?;
            let data = r
                .take(len, "array data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Array::from_vec(&shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Archive { metadata, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint { offset, reason: reason.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(self.corrupt(self.pos, format!("truncated {what}: need {n} bytes"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn len_u64(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| self.corrupt(at, format!("{what} {v} too large")))
    }
}
