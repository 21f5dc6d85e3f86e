//! Inputs shared by the benchmarks.

use matanet::config::{ArchConfig, EpisodeShape};
use matanet::data::synthetic::synthetic_benchmark;
use matanet::data::DatasetSplit;
use matanet::episode::{episode_rng, sample_episode, EpisodeTask};
use matanet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Compact architecture used by the episode benchmarks.
pub fn compact_arch() -> ArchConfig {
    ArchConfig {
        image_size: 32,
        width: 16,
        ..ArchConfig::default()
    }
}

pub fn test_split(image_size: usize) -> DatasetSplit {
    synthetic_benchmark(0, 5, 20, image_size, 0.1, 0, 0).1
}

pub fn episode(split: &DatasetSplit, shot: usize, queries: usize) -> EpisodeTask<f32> {
    let shape = EpisodeShape { way: 5, shot, queries };
    sample_episode(split, shape, &mut episode_rng(0, 0)).expect("split is large enough")
}
