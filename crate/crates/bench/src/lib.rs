//! Fixtures shared by the benchmarks.

use mar_core::rng::rng_from_seed;
use mar_core::nn::Tensor;
use rand::Rng;

/// Tensor of the given shape with entries uniform in [-1, 1).
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Values uniform in [0, 1).
pub fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}
