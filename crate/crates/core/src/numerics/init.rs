//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::scalar::Real;
use super::tensor::Tensor;

/// Normal(0, std) truncated to ±2·std by rejection.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::from_f64(v);
        }
    })
}

/// Kaiming-style normal for convolutions feeding GELU: std = sqrt(2 / fan_in).
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    trunc_normal(shape, libm::sqrt(2.0 / fan_in.max(1) as f64), rng)
}
