//! Seeded random streams. ChaCha8 keeps streams bit-identical across platforms.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; the parent stream is not advanced.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn range(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        self.inner.random_range(lo..=hi_inclusive)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec<T: Scalar>(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n).map(|_| T::from_f64(self.normal() * std)).collect()
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, self.normal_vec(n, std)).expect("length matches shape")
    }

    pub fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}
