use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epoch-granular linear warmup followed by cosine annealing to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 5e-5,
            warmup_epochs: 5,
            total_epochs: 55,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "need 0 <= warmup_epochs < total_epochs, got {} and {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch > self.total_epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside [0, {}]",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * epoch as f64 / self.warmup_epochs as f64);
        }
        if epoch == self.total_epochs {
            return Ok(0.0);
        }
        let progress =
            (epoch - self.warmup_epochs) as f64 / (self.total_epochs - self.warmup_epochs) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}
