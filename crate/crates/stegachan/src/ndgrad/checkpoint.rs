//! Binary container for named f32 tensors with a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"STGARCH1"
//! version  u32      currently 1
//! hdr_len  u32      JSON header byte length
//! header   hdr_len  arbitrary JSON (net config, step counter, ...)
//! count    u32      number of tensors
//! entry*   count times:
//!   name_len u16, name bytes (UTF-8)
//!   ndim     u8,  dims ndim x u32
//!   data     numel x f32 LE
//! ```
//!
//! Entries are written in name order, and f32 bits pass through untouched,
//! so save/load round-trips are byte-exact. The parser treats its input as
//! untrusted: every length is validated against the remaining buffer before
//! any allocation sized from it.

use std::collections::BTreeMap;
use std::path::Path;

use super::exec::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STGARCH1";
const VERSION: u32 = 1;

const MAX_HEADER: usize = 1 << 20;
const MAX_TENSORS: usize = 4096;
const MAX_NAME: usize = 1024;
const MAX_NDIM: usize = 8;
const MAX_NUMEL: usize = 1 << 26;

#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Data(format!(
                "archive truncated: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
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
}

impl TensorArchive {
    pub fn new(header: serde_json::Value) -> Self {
        TensorArchive {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn from_params(header: serde_json::Value, params: &ParamStore<f32>) -> Self {
        let mut a = TensorArchive::new(header);
        for (name, t) in params.iter() {
            a.tensors.insert(name.clone(), t.clone());
        }
        a
    }

    pub fn to_params(&self) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        for (name, t) in &self.tensors {
            p.insert(name, t.clone());
        }
        p
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a stegachan archive (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported archive version {} (expected {})",
                version, VERSION
            )));
        }
        let hdr_len = r.u32()? as usize;
        if hdr_len > MAX_HEADER {
            return Err(Error::Data(format!("header too large: {} bytes", hdr_len)));
        }
        let header: serde_json::Value = serde_json::from_slice(r.take(hdr_len)?)
            .map_err(|e| Error::Data(format!("bad archive header json: {}", e)))?;
        let count = r.u32()? as usize;
        if count > MAX_TENSORS {
            return Err(Error::Data(format!("too many tensors: {}", count)));
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            if name_len > MAX_NAME {
                return Err(Error::Data(format!("tensor name too long: {}", name_len)));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            if ndim > MAX_NDIM {
                return Err(Error::Data(format!("tensor rank too large: {}", ndim)));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= MAX_NUMEL)
                    .ok_or_else(|| Error::Data("tensor too large".into()))?;
                shape.push(d);
            }
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
                return Err(Error::Data(format!("duplicate tensor name '{}'", name)));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after archive payload",
                buf.len() - r.pos
            )));
        }
        Ok(TensorArchive { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_bytes(&buf)
    }
}
