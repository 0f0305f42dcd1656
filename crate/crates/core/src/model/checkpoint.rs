//! Binary checkpoint container.
//!
//! ```text
//! "HMCK" | version u32 | fingerprint u64 | seed u64
//! | spec_len u32 | spec JSON
//! | count u32 | count x (name_len u16, name, offset u64, length u64)
//! | payload: concatenated HMT1 tensors (offsets relative to payload start)
//! ```
//! All integers little-endian.

use std::path::Path;

use super::ModelSpec;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{hmt, Tensor};

const MAGIC: &[u8; 4] = b"HMCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: ModelSpec,
    pub fingerprint: u64,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor<T>)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = serde_json::to_vec(&self.spec).expect("spec serialises");
        let blobs: Vec<Vec<u8>> = self.tensors.iter().map(|(_, t)| hmt::encode(t)).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for ((name, _), blob) in self.tensors.iter().zip(&blobs) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            offset += blob.len() as u64;
        }
        for blob in blobs {
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut c = Cursor { bytes, at: 0 };
        if c.take(4)? != MAGIC {
            return Err("bad magic, not a checkpoint".into());
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let fingerprint = c.u64()?;
        let seed = c.u64()?;
        let spec_len = c.u32()? as usize;
        let spec: ModelSpec =
            serde_json::from_slice(c.take(spec_len)?).map_err(|e| format!("spec: {e}"))?;
        let count = c.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(n)?)
                .map_err(|_| "tensor name is not UTF-8".to_string())?
                .to_string();
            let offset = c.u64()? as usize;
            let length = c.u64()? as usize;
            entries.push((name, offset, length));
        }
        let payload = &bytes[c.at..];
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected = 0usize;
        for (name, offset, length) in entries {
            if offset != expected || offset.checked_add(length).is_none_or(|e| e > payload.len()) {
                return Err(format!("tensor `{name}` has an invalid payload range"));
            }
            let (t, used) = hmt::decode::<T>(&payload[offset..offset + length])
                .map_err(|e| format!("tensor `{name}`: {e}"))?;
            if used != length {
                return Err(format!("tensor `{name}` has trailing bytes"));
            }
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(format!("duplicate tensor `{name}`"));
            }
            expected = offset + length;
            tensors.push((name, t));
        }
        if expected != payload.len() {
            return Err("trailing bytes after payload".into());
        }
        Ok(Checkpoint {
            spec,
            fingerprint,
            seed,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}
