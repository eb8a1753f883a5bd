//! Shared fixtures for the criterion benchmarks in `benches/`.

use prismnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `rows × cols` matrix in `[-1, 1]`.
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0, &mut rng(seed))
}
