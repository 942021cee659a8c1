#![allow(dead_code)]

use mmlnet::corruption::{apply_mask, build_mask};
use mmlnet::datasets::{generate_synthetic_with, SyntheticConfig};
use mmlnet::{ExperimentConfig, MissingRates, Sample};

/// d = 8 model on 16×16 images with 8-pixel patches.
pub fn tiny_config(extra: &[&str]) -> ExperimentConfig {
    let mut overrides = vec![
        "d=8",
        "layers=1",
        "heads=2",
        "ffn_hidden=16",
        "vocab_size=64",
        "fusion_layers=1",
        "adapter_hidden=2",
        "proj_dim=4",
        "image_side=16",
        "patch_size=8",
        "batch_size=8",
    ];
    overrides.extend_from_slice(extra);
    ExperimentConfig::default().with_overrides(&overrides).unwrap()
}

pub fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
    generate_synthetic_with(&SyntheticConfig {
        n,
        seed,
        separation: 0.8,
        noise: 0.4,
        image_side: 16,
        patch_size: 8,
    })
    .unwrap()
}

pub fn masked(samples: &[Sample], rates: MissingRates, seed: u64) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| apply_mask(s, &build_mask(s, rates, seed, 8).unwrap(), 8).unwrap())
        .collect()
}
