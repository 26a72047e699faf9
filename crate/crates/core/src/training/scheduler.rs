use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` once the monitored loss has gone
/// `patience` consecutive epochs without a strict decrease; never below
/// `min_lr`. No cooldown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    wait: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records one epoch's loss and returns the rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}
