//! Shared fixtures for the benchmarks.

use idmorph::networks::NetConfig;
use idmorph::training::TrainConfig;
use idmorph::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1]` tensor from a fixed seed.
pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// The smoke-run architecture: 64×64 images, base width 16.
pub fn smoke_config(batch_size: usize) -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            base_channels: 16,
            num_ids: 8,
            ..NetConfig::default()
        },
        batch_size,
        ..TrainConfig::default()
    }
}
