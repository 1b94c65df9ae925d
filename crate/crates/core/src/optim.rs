//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters. Construction validates them.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got ({beta1}, {beta2})"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {eps}")));
        }
        Ok(AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        })
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second moment estimates per parameter name, plus the step counter.
#[derive(Debug, Default)]
pub struct Adam {
    step: u64,
    slots: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, tensor)` pair using the gradient
    /// stored on the tensor. A missing gradient is treated as zero. Gradients
    /// are cleared after the update.
    pub fn step<'a, I>(&mut self, cfg: &AdamConfig, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, tensor) in params {
            let n = tensor.numel();
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
            if slot.m.len() != n {
                return Err(Error::Dim(format!(
                    "optimizer state for '{name}' has {} entries, parameter has {n}",
                    slot.m.len()
                )));
            }
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let data = tensor.data_mut();
            if let Some(g) = grad {
                for i in 0..n {
                    let gi = g[i];
                    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * gi;
                    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * gi * gi;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            } else {
                for i in 0..n {
                    slot.m[i] *= cfg.beta1;
                    slot.v[i] *= cfg.beta2;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}
