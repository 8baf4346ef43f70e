//! First-order optimizers over `f32` parameters with `f64` gradients.
//!
//! Moment buffers are `f32` so a saved optimizer state restores bit-exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerKind::Sgd { momentum } => (0.0..1.0).contains(&momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Updates applied so far.
    pub step: u64,
    /// First moment (Adam) or velocity (SGD).
    pub m: Vec<f32>,
    /// Second moment; empty for SGD.
    pub v: Vec<f32>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Result<Self> {
        kind.validate()?;
        let v = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; n],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Ok(Self { kind, step: 0, m: vec![0.0; n], v })
    }

    /// Rebuilds a saved state, checking buffer sizes against `n` parameters.
    pub fn restore(kind: OptimizerKind, step: u64, m: Vec<f32>, v: Vec<f32>, n: usize) -> Result<Self> {
        kind.validate()?;
        let want_v = if matches!(kind, OptimizerKind::Adam { .. }) { n } else { 0 };
        if m.len() != n || v.len() != want_v {
            return Err(Error::Layout {
                expected: format!("moments of length {n}/{want_v}"),
                found: format!("{}/{}", m.len(), v.len()),
            });
        }
        Ok(Self { kind, step, m, v })
    }

    pub fn apply(&mut self, params: &mut [f32], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != grad.len() || self.m.len() != grad.len() {
            return Err(Error::Layout {
                expected: format!("{} parameters", self.m.len()),
                found: format!("{} params / {} grads", params.len(), grad.len()),
            });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, m), &g) in params.iter_mut().zip(&mut self.m).zip(grad) {
                    let vel = momentum * *m as f64 + g;
                    *m = vel as f32;
                    *p = (*p as f64 - lr * vel) as f32;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let k = self.step as i32;
                let bc1 = 1.0 - libm::pow(beta1, k as f64);
                let bc2 = 1.0 - libm::pow(beta2, k as f64);
                for (((p, m), v), &g) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
                    let m1 = beta1 * *m as f64 + (1.0 - beta1) * g;
                    let v1 = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                    *m = m1 as f32;
                    *v = v1 as f32;
                    let step = lr * (m1 / bc1) / (libm::sqrt(v1 / bc2) + eps);
                    *p = (*p as f64 - step) as f32;
                }
            }
        }
        Ok(())
    }
}
