#![allow(dead_code)]

use simprop::data::{generate_dataset, Dataset, SyntheticConfig};
use simprop::model::ModelConfig;
use simprop::train::TrainConfig;
use tempfile::TempDir;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        encoder_channels: vec![4, 6, 6],
        feature_channels: 4,
        fusion_channels: 8,
        decoder_channels: 4,
        ..Default::default()
    }
}

pub fn small_data() -> SyntheticConfig {
    SyntheticConfig {
        image_size: 32,
        samples_per_class: 12,
        ..Default::default()
    }
}

/// A generated 32×32 dataset; the directory lives as long as the guard.
pub fn dataset(seed: u64) -> (TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small_data(), seed, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    (dir, ds)
}

pub fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        episodes_per_epoch: 4,
        batch_size: 2,
        val_episodes: 4,
        ..Default::default()
    }
}

pub fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}
