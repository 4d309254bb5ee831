//! AdamW with global-norm gradient clipping and polynomial learning-rate decay.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
        }
    }
}

/// `base · (1 − i/total)^power`.
pub fn poly_lr(base: f64, i: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - i as f64 / total as f64).max(0.0).powf(power)
}

pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    moments: HashMap<usize, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Global L2 norm of a gradient set.
    pub fn grad_norm(grads: &[(usize, Vec<T>)]) -> f64 {
        grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// One update of `params` (id, value) with `grads` (id, gradient). Rank-1
    /// tensors (biases, norm gains) are not decayed. Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut [(usize, &mut Tensor<T>)], grads: &[(usize, Vec<T>)], lr: f64) -> f64 {
        self.step += 1;
        let norm = Self::grad_norm(grads);
        let clip = if norm > self.cfg.clip_norm && norm > 0.0 {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let by_id: HashMap<usize, &Vec<T>> = grads.iter().map(|(i, g)| (*i, g)).collect();
        for (id, value) in params.iter_mut() {
            let Some(g) = by_id.get(id) else { continue };
            let decay = if value.shape().len() >= 2 {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let n = value.len();
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (j, p) in value.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64() * clip;
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + self.cfg.eps);
                let pj = p.as_f64();
                *p = T::lit(pj - lr * (upd + decay * pj));
            }
        }
        norm
    }
}
