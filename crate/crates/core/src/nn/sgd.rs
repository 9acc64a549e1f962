use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Plain SGD with a step-decayed learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_interval_batches: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            decay_factor: 0.98,
            decay_interval_batches: 50_000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor {} must be in (0, 1]", self.decay_factor)));
        }
        if self.decay_interval_batches == 0 {
            return Err(Error::Config("decay interval must be positive".into()));
        }
        Ok(())
    }

    /// `lr · decay^floor(counter / interval)`.
    pub fn effective_lr(&self, batch_counter: u64) -> f64 {
        let steps = (batch_counter / self.decay_interval_batches) as i32;
        self.learning_rate * self.decay_factor.powi(steps)
    }
}

/// `p ← p − lr_eff · g`. Nothing is updated if any gradient is non-finite.
pub fn sgd_step<T: Real, M: Parameterized<T>>(
    params: &mut M,
    grads: &M,
    cfg: &SgdConfig,
    batch_counter: u64,
) -> Result<()> {
    let grads = grads.params();
    if let Some(bad) = grads.iter().find(|g| g.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient(bad.name.clone()));
    }
    let lr = T::lit(cfg.effective_lr(batch_counter));
    for ((name, p), g) in params.params_mut().into_iter().zip(grads) {
        debug_assert_eq!(name, g.name);
        for (pv, &gv) in p.iter_mut().zip(g.data) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
