//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use emr_core::data::synthetic_split;
use emr_core::{AttackConfig, DatasetSplit, ModelSpec, Scalar, TrainConfig};

pub const PROTO_SEED: u64 = 7;
pub const TRAIN_SEED: u64 = 8;
pub const TEST_SEED: u64 = 9;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// MNIST-shaped synthetic digits.
pub fn digits<T: Scalar>(n: usize, sample_seed: u64) -> DatasetSplit<T> {
    synthetic_split(n, [1, 28, 28], 10, PROTO_SEED, sample_seed).unwrap()
}

/// The protocol that produced `golden_mlp.ckpt`.
pub fn golden_config() -> TrainConfig {
    TrainConfig {
        model: ModelSpec::mlp4([1, 28, 28], 10).with_width(32),
        epochs: 10,
        lr_decay_epochs: vec![8],
        monitor_samples: 100,
        eval_batch_size: 100,
        seed: 5,
        ..TrainConfig::mnist_mlp4()
    }
}

pub fn golden_attack() -> AttackConfig {
    AttackConfig::pgd(0.1, 0.01, 20)
}
