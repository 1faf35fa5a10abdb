//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to the parameters named in `grads`; all others are
    /// left untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)]) {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            assert_eq!(p.value.shape(), g.shape(), "gradient shape for {}", p.name);
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mut x = *w as f64;
                x -= c.lr * c.weight_decay * x;
                x -= c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w = x as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Group::Adapter, Tensor::new(&[3], vec![1.0f32, -2.0, 0.5]));
        let frozen = store.add("f", Group::Base, Tensor::new(&[1], vec![7.0f32]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut store, &[(id, Tensor::new(&[3], vec![3.0, -0.5, 1e-3]))]);
        let w = store.get(id).value.data().to_vec();
        // Bias-corrected first step is lr·g/(|g| + eps) per entry.
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6 && (w[2] - 0.4).abs() < 1e-4);
        assert_eq!(store.get(frozen).value.data(), &[7.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Group::Adapter, Tensor::new(&[1], vec![2.0f32]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        opt.step(&mut store, &[(id, Tensor::new(&[1], vec![0.0]))]);
        assert!((store.get(id).value.item() - 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Group::Adapter, Tensor::new(&[2], vec![3.0f32, -4.0]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let g = store.get(id).value.map(|x| 2.0 * x);
            opt.step(&mut store, &[(id, g)]);
        }
        assert!(store.get(id).value.data().iter().all(|x| x.abs() < 1e-2));
    }
}
