//! Minimal CPU neural-network toolkit backing the built-in tiny backbones.
//!
//! Parameters live in a [`ParamStore`]: a flat, ordered list of named tensors
//! tagged with the block they belong to. Layers keep indices into the store
//! so that freezing, snapshots, optimizers and checkpoints all operate on the
//! store alone.

pub mod layers;
pub mod mlp;
pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ParamId = usize;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub block: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    /// Running statistics and other state that optimizers never touch.
    #[serde(default)]
    pub buffer: bool,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, block: &str, name: &str, shape: &[usize], value: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        self.entries.push(ParamEntry {
            block: block.to_string(),
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
            buffer: false,
            grad: vec![0.0; n],
        });
        self.entries.len() - 1
    }

    pub fn add_buffer(&mut self, block: &str, name: &str, value: Vec<f64>) -> ParamId {
        let id = self.add(block, name, &[value.len()], value);
        self.entries[id].buffer = true;
        id
    }

    /// He-uniform initialisation for a weight with the given fan-in.
    pub fn add_he<R: Rng + ?Sized>(&mut self, block: &str, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(block, name, shape, value)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &mut self.entries[id];
        if e.grad.len() != e.value.len() {
            e.grad = vec![0.0; e.value.len()];
        }
        &mut e.grad
    }

    /// Value and gradient of one entry, borrowed together.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&[f64], &mut [f64]) {
        let e = &mut self.entries[id];
        if e.grad.len() != e.value.len() {
            e.grad = vec![0.0; e.value.len()];
        }
        (&e.value, &mut e.grad)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.clear();
            e.grad.resize(e.value.len(), 0.0);
        }
    }

    /// Block names in first-appearance order.
    pub fn blocks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.block) {
                out.push(e.block.clone());
            }
        }
        out
    }

    /// Concatenated values of every entry whose block satisfies `select`.
    pub fn snapshot(&self, select: impl Fn(&str) -> bool) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| select(&e.block))
            .flat_map(|e| e.value.iter().copied())
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| !e.buffer).map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.block != b.block || a.name != b.name || a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "parameter layout mismatch at {}/{}: {:?} vs {}/{} {:?}",
                    a.block, a.name, a.shape, b.block, b.name, b.shape
                )));
            }
            a.value.clone_from(&b.value);
        }
        Ok(())
    }
}

/// Forward-pass context: training mode and the randomness dropout consumes.
pub struct Ctx<R> {
    pub train: bool,
    pub rng: R,
}

#[cfg(test)]
pub(crate) mod gradcheck {
    /// Central finite difference of `f` around `x[i]`.
    pub fn numeric(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += eps;
        let fp = f(&xp);
        xp[i] -= 2.0 * eps;
        let fm = f(&xp);
        (fp - fm) / (2.0 * eps)
    }

    pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let scale = analytic.abs().max(numeric.abs()).max(1e-3);
        assert!(
            (analytic - numeric).abs() / scale < 1e-4,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }
}
