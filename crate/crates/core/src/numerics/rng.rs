//! Seeded, splittable random streams.
//!
//! Child streams are keyed by a hash of the parent seed and a list of labels
//! (client id, epoch, ...), so parallel workers draw independent sequences
//! without sharing state.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with labels into a new seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(splitmix(seed), |acc, &l| splitmix(acc ^ splitmix(l)))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha12Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `labels`; does not advance `self`.
    pub fn derive(&self, labels: &[u64]) -> Rng {
        Rng::new(derive_seed(self.seed, labels))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        assert!(std >= 0.0 && std.is_finite(), "invalid gaussian std {std}");
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    pub fn uniform(&mut self, a: f64, b: f64) -> f64 {
        assert!(a <= b, "invalid uniform interval [{a}, {b}]");
        if a == b {
            return a;
        }
        a + (b - a) * self.inner.random::<f64>()
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "invalid integer interval [{lo}, {hi}]");
        self.inner.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        assert!((0.0..=1.0).contains(&p), "invalid bernoulli probability {p}");
        if p == 0.0 {
            return false;
        }
        if p == 1.0 {
            return true;
        }
        self.inner.random::<f64>() < p
    }

    /// Circularly-symmetric complex Gaussian with total variance `variance`.
    pub fn complex_gaussian(&mut self, variance: f64) -> Complex64 {
        assert!(variance >= 0.0, "invalid complex gaussian variance {variance}");
        let s = (variance / 2.0).sqrt();
        Complex64::new(self.gaussian(0.0, s), self.gaussian(0.0, s))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}
