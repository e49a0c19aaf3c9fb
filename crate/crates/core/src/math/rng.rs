//! Seeded randomness.
//!
//! Every stochastic draw in the crate goes through [`SeededRng`], a thin wrapper
//! over xoshiro256++ seeded from a `u64` via SplitMix64 (the reference seeding
//! procedure implemented by `rand_xoshiro`). Uniform floats use the top 53 bits
//! of each output, so streams are identical on every platform.

use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::Matrix;

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    /// Independent child stream; the parent advances by one draw.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi]` (the upper end is reachable only up to rounding).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Unit vector of length `n` scaled to norm `radius`, direction uniform on the sphere.
    pub fn sphere(&mut self, n: usize, radius: f64) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..n).map(|_| self.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x * radius / norm).collect();
            }
        }
    }
}

/// Matrix with i.i.d. entries uniform in `[-bound, bound]`.
pub fn init_uniform(rows: usize, cols: usize, bound: f64, rng: &mut SeededRng) -> Matrix {
    assert!(bound > 0.0, "init_uniform bound must be positive");
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_in(-bound, bound))
}

/// Glorot/Xavier uniform bound `sqrt(6 / (rows + cols))`.
pub fn glorot_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Matrix with i.i.d. standard normal entries.
pub fn init_normal(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = init_uniform(4, 5, 0.3, &mut SeededRng::new(42));
        let b = init_uniform(4, 5, 0.3, &mut SeededRng::new(42));
        assert_eq!(a, b);
        let c = init_uniform(4, 5, 0.3, &mut SeededRng::new(43));
        assert_ne!(a, c);
    }

    #[test]
    fn bound_respected() {
        let m = init_uniform(50, 50, 0.01, &mut SeededRng::new(1));
        assert!(m.max_abs() <= 0.01);
    }

    #[test]
    fn empirical_mean_near_zero() {
        let m = init_uniform(1, 100_000, 0.1, &mut SeededRng::new(2024));
        let mean = m.sum() / 100_000.0;
        assert!(mean.abs() <= 0.001, "mean {mean}");
    }

    #[test]
    fn stream_is_pinned() {
        // Frozen first draws: guards against silent generator changes.
        let mut rng = SeededRng::new(7);
        assert_eq!(rng.next_u64(), 1021219803524665661);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = SeededRng::new(3);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[rng.below(7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }

    #[test]
    fn sphere_radius() {
        let v = SeededRng::new(5).sphere(6, 1e-4);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1e-4).abs() < 1e-18);
    }
}
