//! Shared inputs for the benchmarks.

use holitok::codec::bottleneck::standard_normal;
use holitok::numerics::{Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standard normal tensor scaled by `std`, fixed per `seed`.
pub fn normal<T: Real>(shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t: Tensor<f64> = standard_normal(shape, &mut rng);
    Tensor::from_f64(&t.map(|v| v * std))
}

pub fn leaf<T: Real>(shape: &[usize], std: f64, seed: u64) -> Var<T> {
    Var::leaf(normal(shape, std, seed), true).expect("finite leaf")
}

/// One second of a two-tone test signal.
pub fn tone(sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    (0..sample_rate as usize)
        .map(|i| {
            let t = i as f64 / sr;
            0.3 * (2.0 * std::f64::consts::PI * 220.0 * t).sin() + 0.1 * (2.0 * std::f64::consts::PI * 660.0 * t).sin()
        })
        .collect()
}
