#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! A small deep-learning stack for image score regression: tensors, layers
//! with hand-written backward passes, a gated inverted-residual block, the
//! full regression network, AdamW training with plateau scheduling and early
//! stopping, data loading with augmentation, and evaluation metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the precision.

pub mod block;
pub mod data;
mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
mod rng;
mod scalar;
mod tensor;
pub mod training;

pub use block::{BlockTrace, MambaBlock, MambaBlockConfig};
pub use error::{Error, ErrorClass, Result};
pub use metrics::{evaluate, mae, pearson, predict_dataset, rmse, EvalReport, ScorePredictor};
pub use model::{count_parameters, make_variant, Model, ModelConfig, ParamCount, Variant};
pub use rng::Rng;
pub use scalar::{Precision, Scalar};
pub use tensor::{global_l2_norm, BinaryOp, Tensor, MTNS_MAGIC};
pub use training::{Checkpoint, TrainConfig, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type MambaBlock32 = MambaBlock<f32>;
pub type MambaBlock64 = MambaBlock<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
