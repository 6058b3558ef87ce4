//! Optimization machinery: AdamW, global-norm clipping, plateau learning-rate
//! reduction, early stopping and the MSE objective.

mod adamw;
mod clip;
mod early_stop;
mod loss;
mod scheduler;

pub use adamw::{adamw_update, AdamW, AdamWConfig, AdamWState};
pub use clip::clip_grad_norm;
pub use early_stop::{EarlyStopper, StopDecision};
pub use loss::mse_loss;
pub use scheduler::PlateauScheduler;
