use serde::{Deserialize, Serialize};

use super::image::{
    adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, crop, hflip, resize_bilinear, rotate,
};
use super::NormStats;
use crate::{Error, Result, Rng, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub resize_to: usize,
    pub crop_to: usize,
    pub hflip_prob: f64,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    /// Maximum hue shift as a fraction of the hue circle.
    pub hue: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize_to: 256,
            crop_to: 224,
            hflip_prob: 0.5,
            brightness: [0.8, 1.2],
            contrast: [0.8, 1.2],
            saturation: [0.8, 1.2],
            hue: 0.05,
            max_rotation_deg: 10.0,
        }
    }
}

impl AugmentConfig {
    /// Default settings with the resize/crop pair scaled to a model input size,
    /// keeping the 256:224 ratio.
    pub fn for_input(input_size: usize) -> Self {
        AugmentConfig {
            resize_to: (input_size as f64 * 256.0 / 224.0).round() as usize,
            crop_to: input_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("augment: {msg}")));
        if self.crop_to == 0 || self.crop_to > self.resize_to {
            return bad(format!("need 1 <= crop_to <= resize_to, got {} and {}", self.crop_to, self.resize_to));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad(format!("hflip_prob {} outside [0, 1]", self.hflip_prob));
        }
        for (name, r) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(r[0] >= 0.0 && r[0] <= r[1]) {
                return bad(format!("{name} range {r:?} must satisfy 0 <= lo <= hi"));
            }
        }
        if !(self.hue >= 0.0 && self.hue <= 0.5) {
            return bad(format!("hue {} outside [0, 0.5]", self.hue));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return bad(format!("max_rotation_deg {} must be non-negative", self.max_rotation_deg));
        }
        Ok(())
    }
}

/// One set of random choices for [`apply_augment`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub rotation_deg: f64,
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let slack = (cfg.resize_to - cfg.crop_to) as u64 + 1;
        AugmentDraw {
            top: rng.below(slack) as usize,
            left: rng.below(slack) as usize,
            flip: rng.bernoulli(cfg.hflip_prob),
            brightness: rng.uniform(cfg.brightness[0], cfg.brightness[1]),
            contrast: rng.uniform(cfg.contrast[0], cfg.contrast[1]),
            saturation: rng.uniform(cfg.saturation[0], cfg.saturation[1]),
            hue: rng.uniform(-cfg.hue, cfg.hue),
            rotation_deg: rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg),
        }
    }

    /// Centre crop, no flip, unit jitter, no rotation.
    pub fn identity(cfg: &AugmentConfig) -> Self {
        let off = (cfg.resize_to - cfg.crop_to) / 2;
        AugmentDraw {
            top: off,
            left: off,
            flip: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            rotation_deg: 0.0,
        }
    }
}

/// Resize, crop, flip, jitter, rotate. Output is in `[0, 1]`, not yet normalized.
pub fn apply_augment<S: Scalar>(image: &Tensor<S>, cfg: &AugmentConfig, draw: &AugmentDraw) -> Result<Tensor<S>> {
    let resized = resize_bilinear(image, cfg.resize_to, cfg.resize_to)?;
    let mut img = crop(&resized, draw.top, draw.left, cfg.crop_to, cfg.crop_to)?;
    if draw.flip {
        img = hflip(&img)?;
    }
    if draw.brightness != 1.0 {
        img = adjust_brightness(&img, draw.brightness);
    }
    if draw.contrast != 1.0 {
        img = adjust_contrast(&img, draw.contrast)?;
    }
    if draw.saturation != 1.0 {
        img = adjust_saturation(&img, draw.saturation)?;
    }
    img = adjust_hue(&img, draw.hue)?;
    rotate(&img, draw.rotation_deg)
}

/// Full training transform, ending with ImageNet normalization.
pub fn augment_train<S: Scalar>(
    image: &Tensor<S>,
    cfg: &AugmentConfig,
    stats: &NormStats,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    let draw = AugmentDraw::sample(cfg, rng);
    stats.normalize_image(&apply_augment(image, cfg, &draw)?)
}

/// Direct resize to `size` squared, then normalization.
pub fn transform_eval<S: Scalar>(image: &Tensor<S>, size: usize, stats: &NormStats) -> Result<Tensor<S>> {
    stats.normalize_image(&resize_bilinear(image, size, size)?)
}
