//! Named parameter storage, initialisation and the Adam optimiser.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered map from parameter name to matrix. Insertion order is the serialisation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    /// Glorot-uniform matrix of shape `(rows, cols)`.
    pub fn insert_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit));
        self.insert(name, value);
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn insert_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::ones((rows, cols)));
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Panics on unknown names; used where the model itself created the parameter.
    pub fn expect(&self, name: &str) -> &Array2<f64> {
        self.tensors.get(name).unwrap_or_else(|| panic!("parameter {name} not initialised"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
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
        self.tensors.values().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are created lazily per parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: IndexMap<String, Array2<f64>>,
    v: IndexMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update for every `(name, gradient)` pair.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Array2<f64>>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
