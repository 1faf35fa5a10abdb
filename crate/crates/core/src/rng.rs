//! Seeded randomness.
//!
//! A run has exactly one root seed. Independent streams are derived from it
//! by [`derive_seed`]: the stream label is hashed with FNV-1a and folded into
//! the parent seed through two SplitMix64 finalizer rounds. Streams are
//! therefore stable across releases and platforms, and adding a new stream
//! never perturbs an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derive a child seed from `parent` for the stream named `label`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    splitmix64(splitmix64(parent ^ fnv1a(label)))
}

/// Derive a child seed for the `index`-th member of a numbered stream.
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(parent, label).wrapping_add(splitmix64(index)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(parent: u64, label: &str) -> Rng {
    rng_from_seed(derive_seed(parent, label))
}

/// `n` i.i.d. standard normal draws.
pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x as f32
        })
        .collect()
}

pub fn normal_vec_f64(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
