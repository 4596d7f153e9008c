//! Adaptive moments with decoupled weight decay, and a one-step LR schedule.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients accumulated in `store`. Parameters that
    /// received no gradient still decay.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Param(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let grad = p.grad().map(<[f64]>::to_vec);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * self.weight_decay * data[i];
                data[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Multiplies `lr` by `factor` from step `milestone` on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLr {
    pub lr: f64,
    pub factor: f64,
    pub milestone: usize,
}

impl StepLr {
    pub fn at(&self, step: usize) -> f64 {
        if step >= self.milestone {
            self.lr * self.factor
        } else {
            self.lr
        }
    }
}
