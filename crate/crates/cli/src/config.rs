//! Run configuration file.
//!
//! A run config is one JSON object with four keys, all optional:
//!
//! ```json
//! {
//!   "model": { ... ModelConfig ... },
//!   "train": { ... TrainConfig, including "augment" ... },
//!   "data": {
//!     "images": null, "labels": null, "synthetic": null,
//!     "synthetic_seed": 42, "val_fraction": 0.2, "split_seed": 0,
//!     "val_manifest": null
//!   },
//!   "out_dir": null
//! }
//! ```
//!
//! Missing keys take their defaults and unknown keys are rejected at every
//! level. `mamba-cnn config` prints the canonical form, which is what
//! `to_canonical` produces: pretty-printed, every field present, fields in
//! declaration order.

use std::path::{Path, PathBuf};

use mamba_cnn::data::Split;
use mamba_cnn::training::TrainConfig;
use mamba_cnn::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the images named in `labels`.
    pub images: Option<PathBuf>,
    /// `filename,score` CSV. Defaults to `labels.csv` inside `images`.
    pub labels: Option<PathBuf>,
    /// Generate this many synthetic faces instead of reading files.
    pub synthetic: Option<usize>,
    pub synthetic_seed: u64,
    pub val_fraction: f64,
    pub split_seed: u64,
    /// File listing validation filenames; overrides the random split.
    pub val_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            images: None,
            labels: None,
            synthetic: None,
            synthetic_seed: 42,
            val_fraction: 0.2,
            split_seed: 0,
            val_manifest: None,
        }
    }
}

impl DataConfig {
    pub fn split(&self) -> Split {
        match &self.val_manifest {
            Some(val) => Split::Manifest { val: val.clone() },
            None => Split::Random {
                val_fraction: self.val_fraction,
                seed: self.split_seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Named starting points: `default` (224 px) and `tiny` (48 px desk runs).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "tiny" => {
                let train = TrainConfig {
                    augment: None,
                    ..TrainConfig::default()
                };
                Ok(Self {
                    model: ModelConfig::tiny(),
                    train,
                    ..Self::default()
                })
            }
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}` (expected default or tiny)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.input_size)?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "data: val_fraction {} outside [0, 1)",
                self.data.val_fraction
            )));
        }
        Ok(())
    }

    pub fn to_canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_canonical() {
        for name in ["default", "tiny"] {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_canonical();
            let back = RunConfig::from_json(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_canonical(), text);
        }
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}, "data": {"synthetic": 10}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.data.synthetic, Some(10));
        assert_eq!(cfg.data.synthetic_seed, 42);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"modle": {}}"#,
            r#"{"model": {"width": 3}}"#,
            r#"{"train": {"optimizer": {"momentum": 0.9}}}"#,
            r#"{"train": {"augment": {"blur": 1}}}"#,
            r#"{"data": {"path": "x"}}"#,
        ] {
            assert!(RunConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"data": {"val_fraction": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"input_size": 48}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 0}}"#).is_err());
    }
}
