//! AdamW: Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: first and second moment per parameter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamWState {
            config,
            step_count: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update:
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return shape_err(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return shape_err(format!(
                    "parameter {i}: value {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                ));
            }
        }
        self.step_count += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, g) = (p.data_mut(), g.data());
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                p[i] -= lr * weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
