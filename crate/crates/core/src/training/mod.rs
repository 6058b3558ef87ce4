//! The training loop, checkpoints and gradient checks.

mod checkpoint;
mod config;
pub mod gradcheck;
mod trainer;

pub use checkpoint::{peek_precision, Checkpoint, TrainSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use gradcheck::{
    gradcheck_model, gradcheck_preset, run_gradcheck, GradcheckConfig, GradcheckPreset, GradcheckReport, Objective,
};
pub use trainer::{
    evaluate_loss, history_csv, prediction_mse, train, write_history, EpochRecord, TrainEvent, TrainObserver, TrainOutcome,
    TrainState, Trainer,
};
