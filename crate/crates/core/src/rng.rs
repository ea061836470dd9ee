//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator seeded through `SeedableRng::seed_from_u64`.
//! Both algorithms are fixed and platform independent, so a seed reproduces the
//! same sequence everywhere. Independent purposes (initialisation, shuffling,
//! reparameterisation noise, resampling) draw from separate derived streams so
//! that consuming one never perturbs another.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh stream keyed by `(self.seed, stream)`. Does not advance `self`.
    pub fn derive(&self, stream: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    pub fn normal_tensor(&mut self, shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal())
    }

    pub fn uniform_tensor(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform_range(lo, hi))
    }

    pub(crate) fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
