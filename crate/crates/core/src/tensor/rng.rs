//! Seeded random streams.
//!
//! Every consumer draws from its own stream derived from `(seed, label)`:
//! parameter tensors use their parameter name as the label, data samplers
//! use a label plus the step index. Adding a new parameter therefore never
//! shifts the values drawn for existing ones.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::dense::Tensor;

pub type Rng = Xoshiro256PlusPlus;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(fnv1a(label.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Independent generator for `(seed, label, index)`.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> Rng {
    stream(seed ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03).rotate_left(17), label)
}

/// Normal(0, std) tensor drawn from the stream for `(seed, label)`.
pub fn normal_tensor(seed: u64, label: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = stream(seed, label);
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![0.0; n]
    } else {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    Tensor::new(shape, data).expect("sized")
}

/// Standard-normal tensor drawn from an existing generator.
pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, 1.0).expect("finite");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

/// Draws an index with probability proportional to `probs`.
pub fn categorical(probs: &[f64], rng: &mut Rng) -> usize {
    use rand::RngExt;
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}
