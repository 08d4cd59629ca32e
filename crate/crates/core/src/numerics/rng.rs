//! Deterministic random streams.
//!
//! Every stream is ChaCha8 keyed by a 64-bit seed (expanded with
//! `SeedableRng::seed_from_u64`, which is PCG32-based and platform
//! independent) and a 64-bit stream id. Distinct stream ids under one seed
//! never overlap: each ChaCha stream has a 2^68-byte period of its own.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream for trial `trial` under `seed`.
    pub fn for_trial(seed: u64, trial: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        // stream 0 is the plain `new(seed)` stream
        inner.set_stream(trial.wrapping_add(1));
        Rng { seed, inner }
    }

    /// Splits off a child stream, keyed by a fresh draw from this one.
    pub fn fork(&mut self, stream: u64) -> Rng {
        let child_seed = self.next_u64();
        Rng::for_trial(child_seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.inner.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
