//! Parameter initializers.

use rand::Rng;

use crate::tensor::{Float, Tensor};

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default for convolution and
/// linear layers in most frameworks.
pub fn fan_in_uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

pub fn zeros<T: Float>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones<T: Float>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one())
}
