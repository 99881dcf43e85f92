//! Learnable parameters and their text checkpoint format.
//!
//! A checkpoint is a UTF-8 text file:
//!
//! ```text
//! cetx-checkpoint 1
//! <name> <rank> <dim_0> ... <dim_{rank-1}>
//! <value_0> <value_1> ...
//! ...
//! ```
//!
//! Entries appear in registration order; values are written with Rust's
//! shortest round-trip `f64` formatting, so reading a checkpoint back
//! reproduces every value bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &str = "cetx-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let grad = Tensor::zeros(tensor.shape());
        self.params.push(Param {
            name: name.into(),
            tensor,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform weight matrix `fan_in x fan_out`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).unwrap())
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.get(id).name.starts_with(prefix))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).tensor.len()).sum()
    }

    /// Copies values (not gradients) from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.tensor = src.tensor.clone();
        }
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::from(CHECKPOINT_MAGIC);
        out.push('\n');
        for p in &self.params {
            write!(out, "{} {}", p.name, p.tensor.rank()).unwrap();
            for d in p.tensor.shape() {
                write!(out, " {d}").unwrap();
            }
            out.push('\n');
            let mut first = true;
            for v in p.tensor.data() {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    /// Overwrites values of matching parameters from a checkpoint. Every
    /// parameter of this store must be present with the same shape.
    pub fn load_values(&mut self, checkpoint: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in &mut self.params {
            let t = checkpoint
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {:?}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::shape("checkpoint", p.tensor.shape(), t.shape()));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }
}

/// Parses the text checkpoint format into a name -> tensor map.
pub fn parse_checkpoint(text: &str) -> Result<BTreeMap<String, Tensor>> {
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint("bad header".into()));
    }
    let mut out = BTreeMap::new();
    while let Some(header) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let mut fields = header.split_whitespace();
        let name = fields.next().unwrap().to_string();
        let rank: usize = fields
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("{name}: bad rank")))?;
        let shape = fields
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if shape.len() != rank {
            return Err(Error::Checkpoint(format!("{name}: rank/shape mismatch")));
        }
        let body = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("{name}: missing values")))?;
        let data = body
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let t = Tensor::new(shape, data)
            .map_err(|_| Error::Checkpoint(format!("{name}: value count does not match shape")))?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add_glorot("w", 10, 6, &mut rng);
        let b = store.add_zeros("b", &[6]);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(store.get(w).tensor.max_abs() <= bound);
        assert_eq!(store.get(b).tensor.max_abs(), 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.add_glorot("enc.block0.wq", 4, 3, &mut rng);
        store.add("scalar", Tensor::scalar(std::f64::consts::PI));
        let text = store.to_checkpoint_string();
        let parsed = parse_checkpoint(&text).unwrap();
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.get_mut(id).tensor.fill(0.0);
        }
        other.load_values(&parsed).unwrap();
        for (a, b) in store.iter().zip(other.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn checkpoint_rejects_missing_entry() {
        let mut store = ParamStore::new();
        store.add_zeros("a", &[2]);
        let parsed = parse_checkpoint("cetx-checkpoint 1\n").unwrap();
        assert!(store.load_values(&parsed).is_err());
    }
}
