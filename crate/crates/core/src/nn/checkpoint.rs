//! Parameter checkpoint file.
//!
//! ```text
//! magic   "CMCP"                 4 bytes
//! version u16 LE                 2 bytes
//! count   u32 LE                 4 bytes
//! count × {
//!     name_len u16 LE, name (UTF-8),
//!     rows u32 LE, cols u32 LE,
//!     rows·cols × f32 LE
//! }
//! ```

use std::path::Path;

use super::encoder::ParamBuffers;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMCP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// An ordered collection of named buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor2D)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor2D) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.entries.push((name, tensor));
        }
    }

    /// Adds every buffer of `params` as `"{section}.{name}"`.
    pub fn insert_section<P: ParamBuffers + ?Sized>(&mut self, section: &str, params: &P) {
        for (name, t) in params.buffers() {
            self.insert(format!("{section}.{name}"), t.clone());
        }
    }

    /// Overwrites every buffer of `params` from `"{section}.{name}"`.
    pub fn load_section<P: ParamBuffers + ?Sized>(&self, section: &str, params: &mut P) -> Result<()> {
        let names: Vec<String> = params.buffers().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.into_iter().zip(params.buffers_mut()) {
            let key = format!("{section}.{name}");
            let t = self.require(&key)?;
            if t.shape() != slot.shape() {
                return Err(Error::format(format!(
                    "{key}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor2D> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("checkpoint has no buffer {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("buffer name is not UTF-8"))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format("buffer shape overflows"))?;
            let data = r.f32s(n)?;
            if ck.get(&name).is_some() {
                return Err(Error::format(format!("buffer {name} appears twice")));
            }
            ck.entries.push((name, Tensor2D::from_vec(rows, cols, data)?));
        }
        if !r.is_empty() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
