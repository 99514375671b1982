//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is a single file:
//!
//! ```text
//! 8 bytes   magic "PDCKPT01"
//! 8 bytes   header length, u64 little endian
//! n bytes   UTF-8 JSON header
//! ...       payload: concatenated little-endian f32 tensors
//! ```
//!
//! The header is `{"format": "picodet-checkpoint", "version": 1, "meta": {..},
//! "tensors": [{"name", "kind", "shape", "offset", "numel"}]}` where `offset`
//! counts bytes from the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PDCKPT01";
const FORMAT: &str = "picodet-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay applies to convolution kernels only.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = if kind.is_trainable() { Tensor::zeros(value.shape()) } else { Tensor::default() };
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, kind, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.kind.is_trainable()).map(|p| p.value.numel()).sum()
    }

    /// Trainable scalars whose names start with `prefix`.
    pub fn num_trainable_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.kind.is_trainable() && p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().filter(|p| p.kind.is_trainable()).map(|p| p.grad.sum_sq()).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = (max_norm / norm) as f32;
            for p in self.params.iter_mut().filter(|p| p.kind.is_trainable()) {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }

    /// `(name, shape)` of every entry, in registration order.
    pub fn signature(&self) -> Vec<(String, [usize; 4])> {
        self.params.iter().map(|p| (p.name.clone(), p.value.shape())).collect()
    }

    /// Copies values from `other`, which must have an identical signature.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_compatible(other.params.iter().map(|p| (p.name.as_str(), p.value.shape())))?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    fn check_compatible<'a>(&self, entries: impl Iterator<Item = (&'a str, [usize; 4])>) -> Result<()> {
        let mut seen = 0;
        for (name, shape) in entries {
            let Some(id) = self.id(name) else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            };
            let want = self.get(id).value.shape();
            if want != shape {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {shape:?}, model expects {want:?}")));
            }
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {seen} tensors, model has {}", self.params.len())));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0usize;
        for p in &self.params {
            entries.push(TensorEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.value.shape(),
                offset,
                numel: p.value.numel(),
            });
            offset += p.value.numel() * 4;
        }
        let header = Header { format: FORMAT.to_string(), version: 1, meta, tensors: entries };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + header_bytes.len() + offset);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for p in &self.params {
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Loads tensor values from `path` into this store. Names and shapes must
    /// match exactly. Returns the checkpoint metadata.
    pub fn load(&mut self, path: &Path) -> Result<serde_json::Value> {
        let ckpt = Checkpoint::read(path)?;
        self.check_compatible(ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())))?;
        for (name, t) in ckpt.tensors {
            let id = self.id(&name).expect("checked above");
            self.params[id.0].value = t;
        }
        Ok(ckpt.meta)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: [usize; 4],
    offset: usize,
    numel: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Parsed checkpoint file, independent of any model.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let payload = &bytes[hend..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.numel {
                return Err(Error::Checkpoint(format!("tensor `{}` shape/numel mismatch", e.name)));
            }
            let end = e.offset + e.numel * 4;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name)));
            }
            let data = payload[e.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, Tensor::from_vec(e.shape, data)));
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("conv.weight", ParamKind::Weight, Tensor::from_vec([2, 1, 1, 2], vec![1.0, -2.0, 3.5, 0.25]));
        s.add("bn.mean", ParamKind::RunningMean, Tensor::from_vec([1, 2, 1, 1], vec![0.5, 0.75]));
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = store();
        s.save(&path, serde_json::json!({"step": 3})).unwrap();
        let mut t = store();
        for p in t.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let meta = t.load(&path).unwrap();
        assert_eq!(meta["step"], 3);
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        store().save(&path, serde_json::Value::Null).unwrap();
        let mut other = ParamStore::new();
        other.add("conv.weight", ParamKind::Weight, Tensor::zeros([4, 1, 1, 1]));
        other.add("bn.mean", ParamKind::RunningMean, Tensor::zeros([1, 2, 1, 1]));
        assert!(matches!(other.load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn clip_bounds_the_norm() {
        let mut s = store();
        let id = s.id("conv.weight").unwrap();
        s.get_mut(id).grad = Tensor::from_vec([2, 1, 1, 2], vec![30.0, 40.0, 0.0, 0.0]);
        let before = s.clip_grad_norm(5.0);
        assert!((before - 50.0).abs() < 1e-9);
        assert!(s.grad_norm() <= 5.0 + 1e-5);
    }
}
