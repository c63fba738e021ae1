//! A small self-describing binary container for named `f64` arrays plus JSON
//! metadata. Used for cached datasets and checkpoints.
//!
//! Layout (little endian): `b"MGSL"`, `u32` version, `u32` array count, then
//! per array a `u32` name length, UTF-8 name, `u32` rank, `u64` dims and the
//! raw `f64` payload, then a `u64` metadata length and UTF-8 JSON.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MGSL";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub arrays: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.format("bad magic"));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(r.format(&format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.format("array name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.format("array too large"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.format("array too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        let len = r.u64()? as usize;
        let metadata = serde_json::from_slice(r.take(len)?)?;
        if r.pos != bytes.len() {
            return Err(r.format("trailing bytes"));
        }
        Ok(Self { arrays, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated {
                kind: "container",
                path: self.path.to_path_buf(),
                expected: self.pos.saturating_add(n),
                actual: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn format(&self, detail: &str) -> Error {
        Error::Format {
            kind: "container",
            path: self.path.to_path_buf(),
            detail: detail.to_string(),
        }
    }
}
