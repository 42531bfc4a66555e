use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::Conv2d;
use super::tensor::{Real, Tensor};

/// He-normal weights (σ = √(2 / fan_in)) and zero biases.
pub fn he_conv<T: Real, R: Rng>(out_ch: usize, in_ch: usize, kernel: usize, rng: &mut R) -> Conv2d<T> {
    let fan_in = (in_ch * kernel * kernel) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let n = out_ch * in_ch * kernel * kernel;
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Conv2d {
        weight: Tensor::from_vec([out_ch, in_ch, kernel, kernel], data).expect("sized"),
        bias: vec![T::zero(); out_ch],
    }
}
