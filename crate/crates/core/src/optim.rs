//! Adam with global-norm gradient clipping over a flat parameter buffer.

use serde::{Deserialize, Serialize};

use crate::params::ParameterStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_values: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; num_values], v: vec![0.0; num_values] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Frozen tensors are skipped entirely, so their values and
    /// moment estimates never move.
    pub fn update(&mut self, store: &mut ParameterStore, grad: &[f64]) {
        assert_eq!(grad.len(), store.num_values(), "gradient length does not match the store");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
        for id in ids {
            let range = store.range(id);
            let values = &mut store.flat_mut()[range.clone()];
            for (k, p) in range.zip(values.iter_mut()) {
                let g = grad[k];
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                let mh = self.m[k] / bc1;
                let vh = self.v[k] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
