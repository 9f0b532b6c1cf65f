//! Seedable, splittable random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha`), whose output sequence
//! is fixed by the algorithm and does not depend on the platform. A child
//! stream is derived from its parent's seed and a 64-bit tag through a
//! SplitMix64 mix, so `split` is a pure function of `(seed, tag)` and never
//! advances the parent.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Source of randomness consumed by the samplers and the data pipeline.
///
/// Tests substitute deterministic stubs to force particular draws.
pub trait RandomSource {
    /// Uniform draw from `[0, 1)`.
    fn uniform(&mut self) -> f64;

    /// Standard normal draw.
    fn normal(&mut self) -> f64;

    /// Uniform index in `0..n`. `n` must be positive.
    fn index(&mut self, n: usize) -> usize {
        let i = (self.uniform() * n as f64) as usize;
        i.min(n - 1)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `tag`.
    pub fn split(&self, tag: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            perm.swap(i, j);
        }
        perm
    }
}

impl RandomSource for Rng {
    fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

/// Stable 64-bit tag for a string label, used to name rng streams.
pub fn tag(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
