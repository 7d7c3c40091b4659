use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::tensor::{Element, Tensor};

/// Seeded random stream. [`Rng::split`] derives child streams from the seed
/// path alone, so a child is the same no matter how much the parent has drawn.
#[derive(Clone, Debug)]
pub struct Rng {
    id: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            id: seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.id
    }

    pub fn split(&self, key: u64) -> Rng {
        Rng::new(splitmix64(self.id ^ splitmix64(key)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal_tensor<F: Element>(&mut self, dims: &[usize], std: f64) -> Result<Tensor<F>> {
        Tensor::from_fn(dims.to_vec(), |_| F::lit(self.normal() * std))
    }

    pub fn uniform_tensor<F: Element>(
        &mut self,
        dims: &[usize],
        lo: f64,
        hi: f64,
    ) -> Result<Tensor<F>> {
        Tensor::from_fn(dims.to_vec(), |_| F::lit(lo + (hi - lo) * self.uniform()))
    }
}
