//! Named parameter tensors and the binary checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "MLIPCKPT" | version | tensor count
//! per tensor: name length | name (UTF-8) | rank | dims... | f32 values (row-major, LE)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{MlipError, Result};
use crate::numerics::{Grads, Mat, Precision, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLIPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn matrix(&self, name: &str) -> Result<Mat> {
        self.get(name)
            .map(Tensor::to_matrix)
            .ok_or_else(|| MlipError::InvalidInput(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
            .collect();
        ParamStore { tensors }
    }

    /// Copy every tensor of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        let tensors = self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))).collect();
        ParamStore { tensors }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F64 {
            return;
        }
        for t in self.tensors.values_mut() {
            for x in t.data_mut() {
                *x = precision.round(*x);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Euclidean distance over all entries; layouts must match.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.tensors
            .values()
            .zip(other.tensors.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&u32_len(self.len())?.to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&u32_len(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_len(t.shape().len())?.to_le_bytes())?;
            for &dim in t.shape() {
                w.write_all(&u32_len(dim)?.to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(MlipError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(MlipError::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| MlipError::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank == 0 {
                return Err(MlipError::Format(format!("{name}: rank 0")));
            }
            let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            if store.contains(&name) {
                return Err(MlipError::Format(format!("duplicate tensor {name}")));
            }
            let t = Tensor::new(shape, data).map_err(|e| MlipError::Format(format!("{name}: {e}")))?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

/// Parameters registered on a [`Tape`], looked up by name.
#[derive(Debug, Clone, Default)]
pub struct VarMap {
    vars: IndexMap<String, Var>,
}

impl VarMap {
    /// Register every tensor of `store` as a trainable leaf (or a constant).
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let m = t.to_matrix();
                let v = if trainable { tape.param(m) } else { tape.constant(m) };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} was not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Merge another map in; names must not collide.
    pub fn merge(&mut self, other: VarMap) {
        for (k, v) in other.vars {
            let prev = self.vars.insert(k.clone(), v);
            assert!(prev.is_none(), "duplicate parameter {k}");
        }
    }

    /// Collect gradients for the bound tensors into a store shaped like `like`.
    pub fn gradients(&self, tape: &Tape, grads: &Grads, like: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in like.iter() {
            let g = match self.vars.get(name) {
                Some(v) => grads.get_or_zeros(*v, tape.shape(*v)),
                None => Mat::zeros(t.matrix_dims()),
            };
            let data = g.iter().cloned().collect();
            out.insert(name, Tensor::new(t.shape().to_vec(), data).expect("gradient shape"));
        }
        out
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| MlipError::Format(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
