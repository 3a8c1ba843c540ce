//! SGD with momentum and Adam, with a step-decay learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Domain(format!("unknown optimizer '{s}' (expected sgd or adam)"))),
        }
    }
}

/// Multiplies the base rate by `factor` at each listed epoch (0-based: the
/// decay is in effect from that epoch on).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: Real,
    pub decay_epochs: Vec<usize>,
    pub factor: Real,
}

impl LrSchedule {
    pub fn constant(base: Real) -> Self {
        Self { base, decay_epochs: Vec::new(), factor: 1.0 }
    }

    /// ×0.3 at 60% and 80% of the epoch budget.
    pub fn step_decay(base: Real, epochs: usize) -> Self {
        let at = |frac: Real| ((epochs as Real) * frac).round() as usize;
        Self { base, decay_epochs: vec![at(0.6), at(0.8)], factor: 0.3 }
    }

    pub fn rate(&self, epoch: usize) -> Real {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base * self.factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub momentum: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl OptimizerConfig {
    pub fn adam(schedule: LrSchedule) -> Self {
        Self { kind: OptimizerKind::Adam, schedule, momentum: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(schedule: LrSchedule) -> Self {
        Self { kind: OptimizerKind::Sgd, ..Self::adam(schedule) }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.base >= 0.0) || !s.base.is_finite() || !(s.factor > 0.0) {
            return Err(Error::Domain(format!("invalid learning-rate schedule {s:?}")));
        }
        Ok(())
    }
}

/// Moment buffers shaped like the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Real>,
    second: Vec<Real>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        let second = match config.kind {
            OptimizerKind::Adam => vec![0.0; n_params],
            OptimizerKind::Sgd => Vec::new(),
        };
        Ok(Self { config, step: 0, first: vec![0.0; n_params], second })
    }

    /// Applies one update in place using the learning rate of `epoch`.
    ///
    /// SGD: `v ← μv + g`, `p ← p − lr·v`. Adam: bias-corrected moments.
    pub fn update(&mut self, params: &mut [Real], grads: &[Real], epoch: usize) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        let lr = self.config.schedule.rate(epoch);
        self.step += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                let mu = self.config.momentum;
                for ((p, v), &g) in params.iter_mut().zip(&mut self.first).zip(grads) {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for (((p, m), v), &g) in params.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(grads) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_keeps_params() {
        for cfg in [OptimizerConfig::sgd(LrSchedule::constant(0.1)), OptimizerConfig::adam(LrSchedule::constant(0.1))] {
            let mut st = OptimizerState::new(cfg, 3).unwrap();
            let mut p = vec![1.0, -2.0, 0.5];
            st.update(&mut p, &[0.0; 3], 0).unwrap();
            assert_eq!(p, vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn sgd_step() {
        let mut st = OptimizerState::new(OptimizerConfig::sgd(LrSchedule::constant(0.1)), 1).unwrap();
        let mut p = vec![1.0];
        st.update(&mut p, &[1.0], 0).unwrap();
        assert_relative_eq!(p[0], 0.9, epsilon = 1e-15);
        // momentum carries: v = 0.9·1 + 1
        st.update(&mut p, &[1.0], 0).unwrap();
        assert_relative_eq!(p[0], 0.9 - 0.19, epsilon = 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut st = OptimizerState::new(OptimizerConfig::adam(LrSchedule::constant(1e-3)), 2).unwrap();
        let mut p = vec![0.0, 0.0];
        st.update(&mut p, &[1.0, -250.0], 0).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        assert_relative_eq!(p[0], -1e-3, epsilon = 1e-10);
        assert_relative_eq!(p[1], 1e-3, epsilon = 1e-10);
    }

    #[test]
    fn schedule_decays() {
        let s = LrSchedule::step_decay(1.0, 50);
        assert_eq!(s.decay_epochs, vec![30, 40]);
        assert_eq!(s.rate(29), 1.0);
        assert_relative_eq!(s.rate(30), 0.3, epsilon = 1e-15);
        assert_relative_eq!(s.rate(45), 0.09, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut st = OptimizerState::new(OptimizerConfig::adam(LrSchedule::constant(0.1)), 2).unwrap();
        assert!(st.update(&mut [0.0; 3], &[0.0; 3], 0).is_err());
        assert!(st.update(&mut [0.0; 2], &[0.0; 1], 0).is_err());
    }

    #[test]
    fn parse_kind() {
        assert_eq!("Adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
