//! Reduce-on-plateau learning rate and early stopping on the monitored
//! validation loss. The two keep separate counters.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub early_stop_patience: usize,
    /// A loss improves only when it is below `best - threshold`.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { factor: 0.5, patience: 5, early_stop_patience: 100, threshold: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    /// `None` until the first observation.
    pub best: Option<f64>,
    pub scheduler_bad_epochs: usize,
    pub early_stop_bad_epochs: usize,
    pub halvings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochDecision {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

impl PlateauState {
    pub fn new(lr0: f64) -> Self {
        Self { lr: lr0, best: None, scheduler_bad_epochs: 0, early_stop_bad_epochs: 0, halvings: 0 }
    }

    /// Records one epoch's validation loss.
    pub fn observe(&mut self, val_loss: f64, cfg: &PlateauConfig) -> EpochDecision {
        let improved = match self.best {
            None => val_loss.is_finite(),
            Some(best) => val_loss < best - cfg.threshold,
        };
        let mut lr_reduced = false;
        if improved {
            self.best = Some(val_loss);
            self.scheduler_bad_epochs = 0;
            self.early_stop_bad_epochs = 0;
        } else {
            self.scheduler_bad_epochs += 1;
            self.early_stop_bad_epochs += 1;
            if self.scheduler_bad_epochs >= cfg.patience {
                self.lr *= cfg.factor;
                self.halvings += 1;
                self.scheduler_bad_epochs = 0;
                lr_reduced = true;
            }
        }
        EpochDecision { improved, lr_reduced, stop: self.early_stop_bad_epochs >= cfg.early_stop_patience }
    }
}
