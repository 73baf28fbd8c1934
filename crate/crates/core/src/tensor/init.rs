//! Seeded parameter initialisers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

pub type SeedRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

pub fn identity(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.data_mut()[i * d + i] = 1.0;
    }
    t
}

pub fn filled(shape: &[usize], value: f64) -> Tensor {
    Tensor::new(shape.to_vec(), vec![value; shape.iter().product()])
}
