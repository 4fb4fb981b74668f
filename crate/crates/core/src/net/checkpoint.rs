//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DSIAMCKP"
//! version  u32
//! hlen     u32      length of the JSON header that follows
//! header   hlen bytes of UTF-8 JSON (CheckpointHeader)
//! count    u32      number of tensor records
//! record*  u16 name length, name bytes, u8 ndim, ndim x u64 extents,
//!          product(extents) raw scalars of the header's dtype
//! ```
//!
//! Model tensors use their parameter names. Optimizer state is stored in the
//! same record list under the `adam.` prefix.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadMode, NetConfig, SiameseNet};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSIAMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prefix of optimizer records.
pub const OPTIMIZER_PREFIX: &str = "adam.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub heads: HeadMode,
    pub net: NetConfig,
    pub normalization: Option<Normalization>,
    /// Optimizer step counter.
    pub step: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl CheckpointHeader {
    pub fn new<T: Scalar>(net: NetConfig) -> Self {
        Self {
            dtype: T::DTYPE.to_string(),
            epoch: 0,
            seed: 0,
            config_hash: String::new(),
            heads: HeadMode::Both,
            net,
            normalization: None,
            step: 0,
            metrics: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| corrupt("truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// Captures every tensor of `model`; `header.net` is replaced by the model's configuration.
    pub fn from_model(model: &SiameseNet<T>, mut header: CheckpointHeader) -> Self {
        header.net = model.config().clone();
        header.dtype = T::DTYPE.to_string();
        let mut tensors = Vec::new();
        model.visit(&mut |name, t, _| {
            let mut t = t.clone();
            t.clear_grad();
            tensors.push((name.to_string(), t));
        });
        Self { header, tensors }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Records whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> + 'a {
        self.tensors.iter().filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    /// Rebuilds the model. The stored model records must be exactly the
    /// model's parameter set with matching shapes.
    pub fn model(&self) -> Result<SiameseNet<T>> {
        let mut net = SiameseNet::<T>::uninit(self.header.net.clone())?;
        let expected: BTreeSet<String> = net.param_names().into_iter().collect();
        let stored: BTreeMap<&str, &Tensor<T>> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(OPTIMIZER_PREFIX))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let stored_names: BTreeSet<String> = stored.keys().map(|s| s.to_string()).collect();
        if expected != stored_names {
            let missing: Vec<_> = expected.difference(&stored_names).collect();
            let extra: Vec<_> = stored_names.difference(&expected).collect();
            return Err(corrupt(format!("parameter set mismatch: missing {missing:?}, unexpected {extra:?}")));
        }
        let mut err = None;
        net.visit_mut(&mut |name, t, _| {
            let s = stored[name];
            if s.shape() != t.shape() {
                err.get_or_insert(Error::ShapeMismatch { op: "checkpoint", left: t.shape().to_vec(), right: s.shape().to_vec() });
            } else {
                *t = s.clone();
            }
        });
        err.map_or(Ok(net), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| corrupt(format!("name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
        if header.dtype != T::DTYPE {
            return Err(corrupt(format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("record name is not UTF-8"))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| corrupt("shape overflow"))?;
            let raw = r.take(numel.checked_mul(T::BYTES).ok_or_else(|| corrupt("shape overflow"))?)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after last record"));
        }
        Ok(Self { header, tensors })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let bytes = self.to_bytes()?;
        w.write_all(&bytes).map_err(|e| Error::io("<stream>", e))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<stream>", e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
