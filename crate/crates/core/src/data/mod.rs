//! Dataset ingestion, image transforms and the synthetic generator.

mod augment;
mod dataset;
mod image;
mod ppm;
mod synth;

pub use augment::{apply_augment, augment_train, transform_eval, AugmentConfig, AugmentDraw};
pub use dataset::{
    load_dataset, load_samples, read_labels, read_split_manifest, split_samples, Dataset, NormStats, Sample,
    Split, SplitData, IMAGENET_MEAN, IMAGENET_STD, SCORE_MAX, SCORE_MIN,
};
pub use image::{
    adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, crop, hflip, normalize_channels,
    resize_bilinear, rotate,
};
pub use ppm::{decode_ppm, encode_ppm, read_ppm};
pub use synth::{
    draw_params, oracle_score, read_synth, render_face, synth_dataset, synth_range, write_synth, FaceParams,
    SynthSet, IMAGES_FILE, IMAGE_DIR, LABELS_FILE, MANIFEST_FILE,
};
