//! AdamW with decoupled weight decay, and global gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = (max_norm / total) as f32;
        for t in grads.values_mut() {
            t.scale_assign(s);
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    /// Per-parameter step counts; parameters only advance when they get a gradient.
    pub counts: BTreeMap<String, u64>,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            counts: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update with learning rate `lr`. Parameters without a gradient
    /// are left untouched, including their weight decay.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) {
        self.step += 1;
        let c = &self.config;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let t = self.counts.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - c.beta1.powi(*t as i32);
            let bc2 = 1.0 - c.beta2.powi(*t as i32);
            let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
            let decay = (1.0 - lr * c.weight_decay) as f32;
            let step = (lr / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let eps = c.eps as f32;
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi *= decay;
                *pi -= step * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
