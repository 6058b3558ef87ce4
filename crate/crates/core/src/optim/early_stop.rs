#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based early stopping that keeps a snapshot of the best state.
#[derive(Debug, Clone)]
pub struct EarlyStopper<T> {
    pub patience: usize,
    pub best_val_loss: f64,
    pub counter: usize,
    pub best_epoch: Option<usize>,
    pub best: Option<T>,
}

impl<T> EarlyStopper<T> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_val_loss: f64::INFINITY,
            counter: 0,
            best_epoch: None,
            best: None,
        }
    }

    /// Strict improvement takes a snapshot and resets the counter; anything
    /// else, ties included, counts against patience.
    pub fn update(&mut self, val_loss: f64, epoch: usize, snapshot: impl FnOnce() -> T) -> StopDecision {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best = Some(snapshot());
            self.best_epoch = Some(epoch);
            self.counter = 0;
        } else {
            self.counter += 1;
        }
        if self.counter >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
