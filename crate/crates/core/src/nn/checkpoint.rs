//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `CPSN`, `u32` version, `u32` block count,
//! then per block `u32` name length, UTF-8 name, `u32` rank, `u32` dims and
//! an `f64` payload; then `u32` length + UTF-8 run configuration, and
//! `u32` length + UTF-8 metadata.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPSN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub blocks: Vec<Block>,
    /// Serialized run configuration (`key=value` lines).
    pub config: String,
    /// Free-form `key=value` metadata such as class names.
    pub meta: String,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Parse(format!("invalid UTF-8: {e}")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    /// Snapshot of every store entry.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, config: String, meta: String) -> Self {
        let blocks = store
            .iter()
            .map(|p| Block {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Self { blocks, config, meta }
    }

    /// Copies block values into same-named store entries; every store entry
    /// must be present with a matching shape.
    pub fn fill_store<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let block =
                self.block(&p.name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if block.shape != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    block.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::from_f64(&block.shape, &block.data)?;
        }
        Ok(())
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            put_str(&mut out, &b.name);
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_str(&mut out, &self.config);
        put_str(&mut out, &self.meta);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Parse("block too large".into()))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            blocks.push(Block { name, shape, data });
        }
        let config = r.string()?;
        let meta = r.string()?;
        if r.pos != buf.len() {
            return Err(Error::Parse(format!("{} trailing bytes in checkpoint", buf.len() - r.pos)));
        }
        Ok(Self { blocks, config, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&buf)
    }

    /// Metadata value for `key`.
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
    }
}
