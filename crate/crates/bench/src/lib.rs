//! Inputs shared by the benchmarks.

use emr_core::data::synthetic_split;
use emr_core::Tensor;

/// Deterministic pseudo-random values in [-1, 1).
pub fn filled(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// A batch of MNIST-shaped synthetic digits and their labels.
pub fn digit_batch(n: usize) -> (Tensor<f32>, Vec<usize>) {
    let split = synthetic_split::<f32>(n, [1, 28, 28], 10, 1, 2).expect("valid split");
    (split.images, split.labels)
}
