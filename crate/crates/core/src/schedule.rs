//! Per-epoch learning-rate and weight-decay schedules.

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

/// `wd_end + (wd_start - wd_end) * (1 + cos(pi * epoch / total)) / 2`; equals
/// `wd_start` at epoch 0 and `wd_end` at `epoch == total`. A zero `total`
/// yields `wd_start`.
pub fn cosine_weight_decay(epoch: usize, total: usize, wd_start: Scalar, wd_end: Scalar) -> Scalar {
    if total == 0 {
        return wd_start;
    }
    let t = epoch.min(total) as Scalar / total as Scalar;
    wd_end + (wd_start - wd_end) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightDecaySchedule {
    pub start: Scalar,
    pub end: Scalar,
}

impl Default for WeightDecaySchedule {
    fn default() -> Self {
        Self { start: 0.04, end: 0.4 }
    }
}

impl WeightDecaySchedule {
    /// Value for 0-indexed `epoch` of `epochs`; the last epoch gets `end`.
    pub fn at(&self, epoch: usize, epochs: usize) -> Scalar {
        cosine_weight_decay(epoch, epochs.saturating_sub(1), self.start, self.end)
    }
}

/// Linear warmup over the first `warmup_fraction` of epochs, then cosine
/// decay from `base` to `min` at the last epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: Scalar,
    pub warmup_fraction: Scalar,
    pub min: Scalar,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 5e-4,
            warmup_fraction: 0.05,
            min: 1e-6,
        }
    }
}

impl LrSchedule {
    pub fn warmup_epochs(&self, epochs: usize) -> usize {
        (self.warmup_fraction * epochs as Scalar).round() as usize
    }

    pub fn at(&self, epoch: usize, epochs: usize) -> Scalar {
        let warmup = self.warmup_epochs(epochs);
        if epoch < warmup {
            return self.base * (epoch + 1) as Scalar / warmup as Scalar;
        }
        let span = epochs.saturating_sub(warmup + 1);
        if span == 0 {
            return self.base;
        }
        let t = (epoch - warmup).min(span) as Scalar / span as Scalar;
        self.min + (self.base - self.min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base > 0.0) || self.min < 0.0 || self.min > self.base {
            return Err(format!("learning rates base={} min={} are invalid", self.base, self.min));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        Ok(())
    }
}
