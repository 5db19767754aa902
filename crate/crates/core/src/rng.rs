//! Seedable, splittable random streams.
//!
//! Every stream is a ChaCha8 generator whose 256-bit key is four consecutive
//! SplitMix64 outputs started from a 64-bit [`Seed`]. Child seeds are derived
//! with [`Seed::derive`], which mixes a label into the parent with SplitMix64,
//! so any (seed, label path) pair names one stream independently of how many
//! values other streams have consumed. Gaussian draws use the ziggurat sampler
//! of `rand_distr::StandardNormal`.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

impl Seed {
    pub fn derive(self, label: u64) -> Seed {
        let mut s = self.0 ^ label.wrapping_mul(GOLDEN).rotate_left(17);
        splitmix64(&mut s);
        Seed(splitmix64(&mut s))
    }

    /// Derives along a path of labels, e.g. `[epoch, sample]`.
    pub fn derive_path(self, labels: &[u64]) -> Seed {
        labels.iter().fold(self, |s, &l| s.derive(l))
    }

    pub fn rng(self) -> Rng {
        let mut state = self.0;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Rng(ChaCha8Rng::from_seed(key))
    }
}

/// Stable labels for the streams used across the crate.
pub mod label {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const DATA: u64 = 5;
    pub const PROBE: u64 = 6;
}

pub struct Rng(ChaCha8Rng);

impl Rng {
    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Standard normal truncated to `[-2, 2]` by rejection.
    pub fn truncated_normal(&mut self) -> f64 {
        loop {
            let z = self.normal();
            if (-2.0..=2.0).contains(&z) {
                return z;
            }
        }
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_path_same_stream() {
        let a: alloc::vec::Vec<u64> = {
            let mut r = Seed(7).derive_path(&[1, 2]).rng();
            (0..4).map(|_| r.next_u64()).collect()
        };
        let mut r = Seed(7).derive(1).derive(2).rng();
        let b: alloc::vec::Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sibling_streams_differ() {
        let mut a = Seed(7).derive(1).rng();
        let mut b = Seed(7).derive(2).rng();
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut r = Seed(3).rng();
        for _ in 0..10_000 {
            let z = r.truncated_normal();
            assert!(z.abs() <= 2.0);
        }
    }
}
