//! Seeded random streams.
//!
//! Every stochastic choice in the crate draws from [`Rng`], a thin wrapper over
//! ChaCha8 (`rand_chacha::ChaCha8Rng`). ChaCha output is defined by the cipher,
//! not by the platform, so a seed reproduces the same stream everywhere.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream, keyed by `tag`, that does not disturb `self`.
    pub fn derive(seed: u64, tag: u64) -> Self {
        Self::new(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.inner.random::<f32>()
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f32 {
        let u1: f64 = self.inner.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = self.inner.random::<f64>();
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        let (head, _) = idx.partial_shuffle(&mut self.inner, k);
        head.to_vec()
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape is non-empty")
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape is non-empty")
    }
}
