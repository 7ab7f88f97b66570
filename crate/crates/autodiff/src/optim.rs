//! AdamW: Adam with bias-corrected moments and decoupled weight decay.
//!
//! θ ← θ·(1 − lr·λ) − lr · m̂ / (√v̂ + ε)

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter whose gradient was written since
    /// the last `zero_grad`. Untouched parameters keep their values and
    /// moments.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if p.touched && !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        while self.m.len() < store.len() {
            let n = store
                .iter()
                .nth(self.m.len())
                .map(|(_, p)| p.value.numel())
                .unwrap_or(0);
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.touched {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.value.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.value.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            let decay = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
            let grad = p.grad.data().to_vec();
            for (((theta, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta = *theta * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
