//! Binary checkpoint format.
//!
//! ```text
//! "HMOE" | version: u32 | count: u32 | count x tensor
//! tensor := name_len: u16 | name: utf8 | rank: u8 | dims: rank x u64 | values: numel x f32
//! ```
//! All integers and floats are little-endian. Adam moments are stored as
//! `<name>.m` / `<name>.v` and the optimizer step as the scalar `step`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::optim::Adam;
use crate::params::{AdamState, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HMOE";
pub const VERSION: u32 = 1;
pub const STEP_TENSOR: &str = "step";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("invalid tensor name in checkpoint")]
    BadName,
    #[error("tensor {name:?}: shape mismatch, checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor {0:?} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint tensor {0:?} does not belong to this model")]
    Unexpected(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 {
        return Err(if MAGIC.starts_with(buf) { CheckpointError::Truncated } else { CheckpointError::BadMagic });
    }
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::BadName)?.to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
        let bytes = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(NamedTensor { name, shape, values });
    }
    Ok(out)
}

fn named<F: Real>(name: String, t: &Tensor<F>) -> NamedTensor {
    NamedTensor { name, shape: t.shape().to_vec(), values: t.data().iter().map(|x| x.as_f64() as f32).collect() }
}

fn named_vec<F: Real>(name: String, shape: &[usize], data: &[F]) -> NamedTensor {
    NamedTensor { name, shape: shape.to_vec(), values: data.iter().map(|x| x.as_f64() as f32).collect() }
}

/// Serializes all parameters, plus moment buffers and the step counter when
/// `adam` is given.
pub fn store_to_tensors<F: Real>(store: &ParamStore<F>, adam: Option<&Adam>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for p in store.iter() {
        out.push(named(p.name.clone(), &p.value));
    }
    if let Some(adam) = adam {
        for p in store.iter() {
            if let Some(s) = &p.adam {
                out.push(named_vec(format!("{}.m", p.name), p.value.shape(), &s.m));
                out.push(named_vec(format!("{}.v", p.name), p.value.shape(), &s.v));
            }
        }
        out.push(NamedTensor { name: STEP_TENSOR.into(), shape: vec![], values: vec![adam.step as f32] });
    }
    out
}

pub fn save<F: Real>(path: impl AsRef<Path>, store: &ParamStore<F>, adam: Option<&Adam>) -> Result<(), CheckpointError> {
    let bytes = encode(&store_to_tensors(store, adam));
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Copies tensors into a store built for the same architecture. Every store
/// parameter must be present with an identical shape. Returns the optimizer
/// step when one was saved; moment buffers are restored into the store.
pub fn load_into<F: Real>(tensors: &[NamedTensor], store: &mut ParamStore<F>) -> Result<Option<u64>, CheckpointError> {
    let mut by_name = std::collections::HashMap::new();
    for t in tensors {
        by_name.insert(t.name.as_str(), t);
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let name = store.get(id).name.clone();
        let t = by_name.get(name.as_str()).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        let expected = store.value(id).shape().to_vec();
        if t.shape != expected {
            return Err(CheckpointError::ShapeMismatch { name, expected, found: t.shape.clone() });
        }
    }
    let mut known: std::collections::HashSet<String> = std::collections::HashSet::new();
    for &id in &ids {
        let name = store.get(id).name.clone();
        let t = by_name[name.as_str()];
        let p = store.get_mut(id);
        for (dst, &src) in p.value.data_mut().iter_mut().zip(&t.values) {
            *dst = F::from_f64(src as f64);
        }
        let m = by_name.get(format!("{name}.m").as_str());
        let v = by_name.get(format!("{name}.v").as_str());
        p.adam = match (m, v) {
            (Some(m), Some(v)) if m.shape == t.shape && v.shape == t.shape => Some(AdamState {
                m: m.values.iter().map(|&x| F::from_f64(x as f64)).collect(),
                v: v.values.iter().map(|&x| F::from_f64(x as f64)).collect(),
            }),
            _ => None,
        };
        known.insert(format!("{name}.m"));
        known.insert(format!("{name}.v"));
        known.insert(name);
    }
    for t in tensors {
        if t.name != STEP_TENSOR && !known.contains(&t.name) {
            return Err(CheckpointError::Unexpected(t.name.clone()));
        }
    }
    Ok(by_name.get(STEP_TENSOR).and_then(|t| t.values.first()).map(|&s| s as u64))
}

pub fn load<F: Real>(path: impl AsRef<Path>, store: &mut ParamStore<F>) -> Result<Option<u64>, CheckpointError> {
    let bytes = fs::read(path)?;
    load_into(&decode(&bytes)?, store)
}
