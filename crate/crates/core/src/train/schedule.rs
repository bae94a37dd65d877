//! Cosine annealing with warm restarts, stepped once per epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Length of the first cycle in epochs.
    pub period: usize,
    /// Cycle length multiplier after each restart.
    pub multiplier: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            period: 10,
            multiplier: 2,
            min_lr: 1e-6,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 || self.multiplier == 0 {
            return Err(Error::Config("scheduler period and multiplier must be positive".into()));
        }
        if !(self.min_lr >= 0.0) {
            return Err(Error::Config("scheduler min_lr must be non-negative".into()));
        }
        Ok(())
    }

    /// `(epochs into the current cycle, cycle length)`.
    pub fn position(&self, epoch: usize) -> (usize, usize) {
        let (mut start, mut len) = (0usize, self.period);
        while epoch >= start + len {
            start += len;
            len *= self.multiplier;
        }
        (epoch - start, len)
    }

    /// Learning rate at `epoch` for a group whose base rate is `base`.
    /// Groups whose base is at or below `min_lr` stay at their base.
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        if base <= self.min_lr {
            return base;
        }
        let (t, len) = self.position(epoch);
        let c = (std::f64::consts::PI * t as f64 / len as f64).cos();
        self.min_lr + (base - self.min_lr) * 0.5 * (1.0 + c)
    }
}
