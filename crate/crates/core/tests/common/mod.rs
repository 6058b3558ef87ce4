#![allow(dead_code)]

use mamba_cnn::data::{synth_range, Dataset, NormStats};
use mamba_cnn::{ModelConfig, Scalar};

/// Train and validation sets cut from one synthetic stream, normalized with
/// the train statistics.
pub fn synth_split<S: Scalar>(n_train: usize, n_val: usize, size: usize, seed: u64) -> (Dataset<S>, Dataset<S>, NormStats) {
    let set = synth_range::<S>(n_train + n_val, size, seed, 0).unwrap();
    let (tr, va) = set.samples.split_at(n_train);
    let stats = NormStats::from_scores(&tr.iter().map(|s| s.score_raw).collect::<Vec<_>>()).unwrap();
    (
        Dataset::new(tr.to_vec(), &stats, size).unwrap(),
        Dataset::new(va.to_vec(), &stats, size).unwrap(),
        stats,
    )
}

/// A small network for 16x16 inputs that trains in milliseconds per epoch.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![4, 8],
        stage_strides: vec![2],
        blocks_per_stage: vec![1],
        expansion_factor: 2,
        head_widths: vec![8],
        head_dropout: vec![0.2],
        pyramid_scales: vec![1, 2],
        input_size: 16,
        ..ModelConfig::default()
    }
}
