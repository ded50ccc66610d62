use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Seeded, splittable random stream.
///
/// Backed by ChaCha8, whose output is specified bit-for-bit, so a seed yields
/// the same sequence on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from the original seed; does not advance
    /// `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    pub fn normal_tensor(&mut self, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| self.normal()).collect()).expect("extents must be >= 1")
    }

    pub fn uniform_tensor(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| self.uniform_range(lo, hi)).collect())
            .expect("extents must be >= 1")
    }
}

/// Glorot/Xavier uniform: i.i.d. `U(−L, L)` with `L = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize, dims: &[usize]) -> Tensor {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be >= 1");
    let limit = glorot_limit(fan_in, fan_out);
    rng.uniform_tensor(dims, -limit, limit)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(42).normal_tensor(&[64]);
        let b = Rng::new(42).normal_tensor(&[64]);
        assert_eq!(a, b);
        assert_ne!(a, Rng::new(43).normal_tensor(&[64]));
    }

    #[test]
    fn forks_are_distinct_and_stable() {
        let base = Rng::new(7);
        let a = base.fork(1).uniform_tensor(&[16], 0.0, 1.0);
        let b = base.fork(2).uniform_tensor(&[16], 0.0, 1.0);
        assert_ne!(a, b);
        assert_eq!(a, Rng::new(7).fork(1).uniform_tensor(&[16], 0.0, 1.0));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = Rng::new(3).permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
