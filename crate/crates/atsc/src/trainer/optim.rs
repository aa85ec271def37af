//! SGD with Nesterov momentum over a fixed parameter group, plus the
//! milestone learning-rate schedule.
//!
//! Weight decay applies to conv/affine weights only; batch-norm gain/shift
//! and biases are exempt. Momentum buffers belong to the group, so two
//! groups never share optimizer state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKind, Parameterized};

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    64
}
fn default_base_lr() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Nesterov momentum coefficient.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("optim.base_lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("optim.weight_decay must be nonnegative".into()));
        }
        if self.decay_factor <= 0.0 {
            return Err(Error::Config("optim.decay_factor must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("optim.epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "optim.milestones must be strictly increasing".into(),
            ));
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::Config(
                "optim.milestones must lie before the final epoch".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: base_lr times decay_factor raised to the number
/// of milestones at or before the epoch.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside the configured budget of {}",
            cfg.epochs
        )));
    }
    let decays = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(cfg.base_lr * cfg.decay_factor.powi(decays as i32))
}

/// One optimizer instance: Nesterov-momentum SGD with per-tensor buffers,
/// tied to a fixed enumeration order of its parameter group.
#[derive(Debug, Clone)]
pub struct SgdGroup {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl SgdGroup {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdGroup {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// Applies one update to every tensor of `parts`, in enumeration order:
    /// g = grad (+ wd * theta for weights); v = mu * v + g; theta -= lr * (g + mu * v).
    pub fn step(&mut self, lr: f64, parts: &mut [&mut dyn Parameterized]) {
        let mut ti = 0;
        for part in parts.iter_mut() {
            part.visit_params_mut(&mut |_, kind, values, grads| {
                if self.buffers.len() == ti {
                    self.buffers.push(vec![0.0; values.len()]);
                }
                let buf = &mut self.buffers[ti];
                assert_eq!(
                    buf.len(),
                    values.len(),
                    "optimizer group composition changed between steps"
                );
                let wd = if kind == ParamKind::Weight {
                    self.weight_decay
                } else {
                    0.0
                };
                for k in 0..values.len() {
                    let g = grads[k] + wd * values[k];
                    buf[k] = self.momentum * buf[k] + g;
                    values[k] -= lr * (g + self.momentum * buf[k]);
                }
                ti += 1;
            });
        }
    }
}
