use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LionConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for LionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam(AdamConfig),
    Lion(LionConfig),
}

/// Optimizer with per-parameter moments, created lazily on the first step.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(config: AdamConfig) -> Self {
        Self::new(OptimizerKind::Adam(config))
    }

    pub fn lion(config: LionConfig) -> Self {
        Self::new(OptimizerKind::Lion(config))
    }

    /// First moments, one per parameter (empty before the first step).
    pub fn moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    /// Apply one update in place. Nothing is modified if any gradient is
    /// non-finite or misaligned with its parameter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Lion(c) => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    let p = p.data_mut();
                    for ((p, &g), m) in p.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let c_t = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *p -= c.lr * (sign(c_t) + c.weight_decay * *p);
                        *m = c.beta2 * *m + (1.0 - c.beta2) * g;
                    }
                }
            }
            OptimizerKind::Adam(c) => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let p = p.data_mut();
                    for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g + c.weight_decay * *p;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

// f64::signum maps 0 to 1; Lion needs sign(0) = 0 so that zero signal is a fixed point.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
