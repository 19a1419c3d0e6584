use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine annealing with warm restarts over whole epochs, followed by a
/// constant tail at `lr_min` until `total_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Period lengths in epochs.
    pub periods: Vec<usize>,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::doubling(4, 6, 100)
    }
}

impl LrSchedule {
    /// `restarts` periods starting at `first` epochs and doubling each time.
    pub fn doubling(restarts: usize, first: usize, total_epochs: usize) -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-5,
            periods: (0..restarts).map(|i| first << i).collect(),
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.periods.is_empty() || self.periods.contains(&0) {
            return Err(Error::Config(format!(
                "periods must be non-empty and positive, got {:?}",
                self.periods
            )));
        }
        if self.annealed_epochs() > self.total_epochs {
            return Err(Error::Config(format!(
                "periods cover {} epochs but training has {}",
                self.annealed_epochs(),
                self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn annealed_epochs(&self) -> usize {
        self.periods.iter().sum()
    }

    /// Period start epochs followed by the end of the last period.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = vec![0];
        for p in &self.periods {
            out.push(out.last().unwrap() + p);
        }
        out
    }

    /// Epoch of the first warm restart.
    pub fn first_restart(&self) -> usize {
        self.periods[0]
    }

    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(epoch >= 0.0 && epoch < self.total_epochs as f64) {
            return Err(Error::contract(format!(
                "epoch {epoch} outside [0, {})",
                self.total_epochs
            )));
        }
        let mut start = 0.0;
        for &p in &self.periods {
            let len = p as f64;
            if epoch < start + len {
                let phase = std::f64::consts::PI * (epoch - start) / len;
                return Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos()));
            }
            start += len;
        }
        Ok(self.lr_min)
    }
}
