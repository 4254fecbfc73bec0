//! Single-file archive holding a JSON manifest and named `f32` arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes   "SCLA"
//! version      u32       currently 1
//! manifest_len u64
//! manifest     manifest_len bytes of UTF-8 JSON
//! n_arrays     u32
//! per array:
//!   name_len   u16
//!   name       name_len bytes of UTF-8
//!   ndim       u8
//!   dims       ndim × u64
//!   data       prod(dims) × f32
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Arrays are written in name order and the manifest with sorted keys, so a
//! load followed by a save reproduces the original bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Array;

pub const MAGIC: &[u8; 4] = b"SCLA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub manifest: serde_json::Value,
    pub arrays: BTreeMap<String, Array<f32>>,
}

impl Archive {
    pub fn new(manifest: serde_json::Value) -> Self {
        Self {
            manifest,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array<f32>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Option<&Array<f32>> {
        self.arrays.get(name)
    }

    /// Fetches an array and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Array<f32>> {
        let a = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("archive lacks array `{name}`")))?;
        if a.shape() != shape {
            return Err(Error::Shape(format!(
                "array `{name}` has shape {:?}, expected {shape:?}",
                a.shape()
            )));
        }
        Ok(a)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, array) in &self.arrays {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize || array.shape().len() > u8::MAX as usize {
                return Err(Error::InvalidArgument(format!("array `{name}` cannot be archived")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(array.shape().len() as u8);
            for &d in array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in array.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if bytes.len() < 32 {
            return Err(r.fail("file shorter than the checksum trailer"));
        }
        let body_len = bytes.len() - 32;
        let magic = r.take(4)?;
        if magic != MAGIC {
            r.pos = 0;
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            r.pos -= 4;
            return Err(r.fail(&format!("unsupported format version {version}")));
        }
        let manifest_len = r.u64()? as usize;
        let manifest_start = r.pos;
        let manifest_bytes = r.take(manifest_len)?;
        let manifest: serde_json::Value = serde_json::from_slice(manifest_bytes).map_err(|e| Error::Archive {
            path: path.to_path_buf(),
            offset: manifest_start as u64 + e.column() as u64,
            reason: format!("manifest is not valid JSON: {e}"),
        })?;
        let n = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..n {
            let name_start = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| {
                    r.pos = name_start;
                    r.fail("array name is not UTF-8")
                })?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.fail("array dimensions overflow"))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| r.fail("array too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if arrays.insert(name.clone(), Array::from_vec(&dims, data)?).is_some() {
                r.pos = name_start;
                return Err(r.fail(&format!("duplicate array `{name}`")));
            }
        }
        if r.pos != body_len {
            return Err(r.fail("trailing bytes before checksum"));
        }
        let digest = Sha256::digest(&bytes[..body_len]);
        if digest.as_slice() != &bytes[body_len..] {
            r.pos = body_len;
            return Err(r.fail("checksum mismatch"));
        }
        Ok(Self { manifest, arrays })
    }

    /// Writes via a temporary sibling file and an atomic rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized archive.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> Error {
        Error::Archive {
            path: self.path.clone(),
            offset: self.pos as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // the checksum trailer is never part of the body
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len().saturating_sub(32));
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(&format!("truncated: wanted {n} more bytes"))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
