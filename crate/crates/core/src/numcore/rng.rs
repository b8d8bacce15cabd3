//! Seeded, splittable random number generation.
//!
//! A [`Rng`] forks into named child streams whose seeds depend only on the
//! parent seed and the name, never on how much of the parent has been
//! consumed. Modules can therefore draw from their own streams in any order.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};

/// Tolerance on `Σ probs = 1` accepted by [`Rng::categorical`].
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent child stream identified by `name`.
    pub fn fork(&self, name: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(fnv1a(name.as_bytes()))))
    }

    /// An independent child stream identified by an index.
    pub fn fork_index(&self, index: u64) -> Rng {
        self.fork(&format!("#{index}"))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        assert!(std >= 0.0, "negative standard deviation");
        if std == 0.0 {
            return mean;
        }
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    /// Draws an index with probability `probs[i]`.
    pub fn categorical(&mut self, probs: &[f64]) -> Result<usize> {
        if probs.is_empty() {
            return Err(Error::invalid("categorical over an empty distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(format!("invalid probabilities {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        let u = self.unit() * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return Ok(i);
                }
            }
        }
        Ok(last)
    }

    /// A point drawn uniformly from the `(k-1)`-simplex (Dirichlet(1, …, 1)).
    pub fn dirichlet_uniform(&mut self, k: usize) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::invalid("simplex dimension must be at least 1"));
        }
        if k == 1 {
            return Ok(vec![1.0]);
        }
        let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut self.inner)).collect();
        let total: f64 = draws.iter().sum();
        Ok(draws.into_iter().map(|d| d / total).collect())
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
