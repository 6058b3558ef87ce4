use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without a strict improvement of the monitored loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub cooldown: usize,
    pub best: f64,
    pub wait: usize,
    pub cooldown_left: usize,
    pub lr: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            min_lr: 0.0,
            cooldown: 0,
            best: f64::INFINITY,
            wait: 0,
            cooldown_left: 0,
            lr,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.wait = 0;
        }
        if self.wait >= self.patience.max(1) {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.wait = 0;
            self.cooldown_left = self.cooldown;
        }
        self.lr
    }
}
