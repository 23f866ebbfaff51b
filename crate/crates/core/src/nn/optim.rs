use serde::{Deserialize, Serialize};

use super::ParamStore;

/// Updates every non-buffer entry whose block passes `trainable`.
/// Entries in frozen blocks are left bit-identical.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, lr: f64, trainable: &dyn Fn(&str) -> bool);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: Vec::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, lr: f64, trainable: &dyn Fn(&str) -> bool) {
        self.velocity.resize(store.entries.len(), Vec::new());
        let SgdConfig { momentum, weight_decay } = self.config;
        for (e, vel) in store.entries.iter_mut().zip(&mut self.velocity) {
            if e.buffer || !trainable(&e.block) || e.grad.len() != e.value.len() {
                continue;
            }
            vel.resize(e.value.len(), 0.0);
            for ((p, g), v) in e.value.iter_mut().zip(&e.grad).zip(vel.iter_mut()) {
                let g = g + weight_decay * *p;
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with per-entry step counts, so blocks unfrozen late start their
/// bias correction from scratch.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<(u64, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: Vec::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, lr: f64, trainable: &dyn Fn(&str) -> bool) {
        self.state.resize(store.entries.len(), (0, Vec::new(), Vec::new()));
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (e, (t, m, v)) in store.entries.iter_mut().zip(&mut self.state) {
            if e.buffer || !trainable(&e.block) || e.grad.len() != e.value.len() {
                continue;
            }
            m.resize(e.value.len(), 0.0);
            v.resize(e.value.len(), 0.0);
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            for (((p, g), mi), vi) in e.value.iter_mut().zip(&e.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}
