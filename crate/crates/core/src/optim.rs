//! Adam with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{GradBuffer, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this; 0 disables.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.t += 1;
        let norm = grads.norm();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let g = &grads.slots()[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g[i] * clip;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..300 {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let x = p.var(id);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap();
            let mut buf = GradBuffer::zeros_like(&store);
            buf.accumulate(&p, &g);
            opt.step(&mut store, &buf);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
