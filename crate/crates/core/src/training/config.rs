use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::optim::AdamWConfig;
use crate::{Error, Precision, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub clip_max_norm: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub precision: Precision,
    /// `None` trains on the eval transform alone.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            clip_max_norm: 1.0,
            scheduler_factor: 0.5,
            scheduler_patience: 10,
            min_lr: 0.0,
            early_stop_patience: 20,
            seed: 0,
            precision: Precision::F32,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, input_size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("train: {msg}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.clip_max_norm > 0.0) {
            return bad(format!("clip_max_norm {} must be positive", self.clip_max_norm));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return bad(format!("scheduler_factor {} outside (0, 1)", self.scheduler_factor));
        }
        if !(self.min_lr >= 0.0) {
            return bad(format!("min_lr {} must be non-negative", self.min_lr));
        }
        if self.early_stop_patience == 0 || self.scheduler_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        self.optimizer.validate()?;
        if let Some(aug) = &self.augment {
            aug.validate()?;
            if aug.crop_to != input_size {
                return bad(format!("augment.crop_to {} differs from model input_size {input_size}", aug.crop_to));
            }
        }
        Ok(())
    }
}
