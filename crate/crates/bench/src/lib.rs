//! Input builders shared by the criterion benchmarks in `benches/`.

use lorafit::model::TokenBatch;
use lorafit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A standard-normal `f32` tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `batch` sequences of exactly `len` random byte tokens.
pub fn random_batch(batch: usize, len: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<u32>> = (0..batch)
        .map(|_| (0..len).map(|_| rng.random_range(3..259)).collect())
        .collect();
    TokenBatch::from_sequences(&seqs, 0).expect("non-empty batch")
}
