//! Model checkpoints.
//!
//! Layout (little-endian): `b"PCKP"`, version `u32`, role `u8`, architecture
//! descriptor (`u32` count then `u32`s), metadata JSON (`u32` length then
//! UTF-8), tensor count `u32`, then per tensor its rank, extents and `f64`
//! payload. Loading checks role and architecture before any parameter is
//! touched.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffgraph::Tensor;
use crate::error::{contract, Error, Result};

pub const MAGIC: &[u8; 4] = b"PCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Classifier,
    Autoencoder,
    Discriminator,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Classifier => 1,
            Role::Autoencoder => 2,
            Role::Discriminator => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Role::Classifier),
            2 => Some(Role::Autoencoder),
            3 => Some(Role::Discriminator),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub architecture: Vec<u32>,
    pub metadata: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Parse { offset: self.bytes.len(), message: format!("truncated checkpoint while reading {what}") });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new(role: Role, architecture: Vec<u32>, metadata: serde_json::Value, tensors: &[&Tensor]) -> Self {
        Self { role, architecture, metadata, tensors: tensors.iter().map(|t| (*t).clone()).collect() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.role.code());
        out.extend_from_slice(&(self.architecture.len() as u32).to_le_bytes());
        for w in &self.architecture {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Parse { offset: 0, message: "bad magic, expected PCKP".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Parse { offset: 4, message: format!("unsupported checkpoint version {version}") });
        }
        let role_at = r.at;
        let role = Role::from_code(r.take(1, "role")?[0])
            .ok_or_else(|| Error::Parse { offset: role_at, message: "unknown role code".into() })?;
        let n_arch = r.u32("architecture length")? as usize;
        let architecture = (0..n_arch).map(|_| r.u32("architecture")).collect::<Result<Vec<_>>>()?;
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.at;
        let metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Parse { offset: meta_at, message: format!("metadata: {e}") })?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.at;
            let rank = r.u32("tensor rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("tensor extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len * 8, "tensor payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Parse { offset: at, message: e.to_string() })?;
            tensors.push(t);
        }
        if r.at != bytes.len() {
            return Err(Error::Parse { offset: r.at, message: "trailing bytes after checkpoint".into() });
        }
        Ok(Self { role, architecture, metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails unless role and architecture match exactly.
    pub fn expect(&self, role: Role, architecture: &[u32]) -> Result<()> {
        if self.role != role {
            return contract(format!("checkpoint holds a {:?}, expected a {role:?}", self.role));
        }
        if self.architecture != architecture {
            return contract(format!(
                "architecture mismatch: checkpoint {:?}, expected {architecture:?}",
                self.architecture
            ));
        }
        Ok(())
    }

    /// Copies the stored tensors into `params`, which must match in count and shape.
    pub fn restore_into(&self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.tensors.len() {
            return contract(format!("checkpoint has {} tensors, model has {}", self.tensors.len(), params.len()));
        }
        if let Some((i, (p, t))) = params.iter().zip(&self.tensors).enumerate().find(|(_, (p, t))| p.shape() != t.shape()) {
            return contract(format!("tensor {i}: checkpoint shape {:?}, model shape {:?}", t.shape(), p.shape()));
        }
        for (p, t) in params.iter_mut().zip(&self.tensors) {
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
