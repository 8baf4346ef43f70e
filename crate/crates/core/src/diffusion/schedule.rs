use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Cumulative signal rates `alpha_bar[t]` for `t = 0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Param(format!("step {t} outside 0..={}", self.steps)));
        }
        Ok(())
    }

    /// Builds a schedule from explicit values, checking its invariants.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::Validation("alpha_bar must start at exactly 1 and have S >= 1".into()));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Validation("alpha_bar must be strictly decreasing".into()));
        }
        if !(*alpha_bar.last().unwrap() > 0.0) {
            return Err(Error::Validation("alpha_bar must stay positive".into()));
        }
        Ok(Self { steps: alpha_bar.len() - 1, alpha_bar })
    }
}

/// Linear-beta schedule: `beta` runs from `beta_min` at step 1 to `beta_max`
/// at step `steps`, and `alpha_bar[t] = prod_{s <= t} (1 - beta_s)`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Param(format!(
            "need S >= 1 and 0 < beta_min <= beta_max < 1, got S={steps}, [{beta_min}, {beta_max}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for s in 1..=steps {
        let beta = if steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * (s - 1) as f64 / (steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}
