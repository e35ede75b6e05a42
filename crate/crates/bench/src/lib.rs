//! Shared fixtures for the benchmarks.

use ccnet::backbone::{build_model, BlockKind, Model, ModelConfig};
use ccnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_map(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_image(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn desk_model(block: BlockKind, use_ldim: bool) -> Model {
    let cfg = ModelConfig {
        blocks_per_scale: 2,
        block,
        use_ldim,
        ..ModelConfig::default()
    };
    build_model(&cfg, 0).expect("desk config is valid")
}
