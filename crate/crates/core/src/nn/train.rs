use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Optimizer schedule shared by every trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Mean loss per epoch, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epoch_losses: Vec<f64>,
}

impl LossCurve {
    pub fn push(&mut self, epoch: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Training { epoch, loss });
        }
        self.epoch_losses.push(loss);
        Ok(())
    }

    pub fn first(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    /// `epoch,loss` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{},{:.8}\n", i + 1, l));
        }
        s
    }
}
