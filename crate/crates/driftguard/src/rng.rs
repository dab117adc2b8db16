//! Seeded randomness with isolated streams per phase.
//!
//! Every stochastic component (init, pretraining, personalization, sampling,
//! evaluation) draws from its own stream derived from `(seed, tag)`, so adding
//! draws to one phase never perturbs another. Same seed, same tag, same
//! sequence of calls => bit-identical values.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Seeded RNG stream. Cloning forks the exact counter state.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    /// Stream keyed by `(seed, tag)` via SHA-256 of the seed bytes and the tag.
    pub fn for_phase(seed: u64, tag: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(tag.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Rng {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Two independent standard normal draws, x then y.
    pub fn normal2(&mut self) -> [f64; 2] {
        [self.normal(), self.normal()]
    }
}
