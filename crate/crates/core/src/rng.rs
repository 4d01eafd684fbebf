//! Seeded random streams.
//!
//! Every stochastic step of the pipeline draws from a [`SeededRng`], a
//! ChaCha8 generator keyed by a 64-bit seed. Independent streams for the same
//! seed are selected with the ChaCha stream id, so a run can hand separate
//! streams to data sampling, gradient noise and mask sampling without the
//! draws of one perturbing the others.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// A fresh stream keyed by the same seed; independent of how far `self`
    /// has advanced.
    pub fn stream(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Skips ahead by `words` 32-bit outputs.
    pub fn advance(&mut self, words: u128) {
        let pos = self.inner.get_word_pos();
        self.inner.set_word_pos(pos + words);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `k` distinct indices from `0..n`, in sampling order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        index::sample(&mut self.inner, n, k).into_vec()
    }

    pub(crate) fn normal_matrix(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        debug_assert!(std >= 0.0);
        let data = (0..rows * cols)
            .map(|_| mean + std * self.standard_normal())
            .collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }

    #[cfg(test)]
    pub(crate) fn gaussian_matrix(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        self.normal_matrix(rows, cols, mean, std)
    }
}

/// Matrix with i.i.d. `N(mean, std²)` entries.
pub fn gaussian_fill(rng: &mut SeededRng, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian_fill needs finite mean and std >= 0, got mean={mean} std={std}"
        )));
    }
    Ok(rng.normal_matrix(rows, cols, mean, std))
}

/// Kaiming-normal init for a `fan_out x fan_in` weight: std = sqrt(2 / fan_in).
pub fn kaiming_normal(rng: &mut SeededRng, fan_out: usize, fan_in: usize) -> Matrix {
    rng.normal_matrix(fan_out, fan_in, 0.0, (2.0 / fan_in as f64).sqrt())
}
