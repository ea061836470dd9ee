//! Little-endian binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "DBVAECKP"
//! version    u32      currently 1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_tensors  u32
//!   name     u32 length + UTF-8 bytes
//!   ndim     u32
//!   dims     ndim x u64
//!   data     product(dims) x f64 (IEEE-754 bits, little endian)
//! ```
//!
//! Values are stored by bit pattern, so a round trip is exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DBVAECKP";
pub const FORMAT_VERSION: u32 = 1;

/// String metadata plus an ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..get_u32(r)? {
            let k = get_str(r)?;
            let v = get_str(r)?;
            metadata.insert(k, v);
        }
        let count = get_u32(r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = get_str(r)?;
            let ndim = get_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(get_u64(r)? as usize);
            }
            let len: usize = shape.iter().product();
            if len.saturating_mul(8) > r.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` is truncated")));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))
}
