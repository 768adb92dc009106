//! Seeded randomness. Every random draw in the crate flows from one root
//! seed through named sub-streams, so independent modules never share or
//! perturb each other's streams.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::tensor::{Scalar, Tensor};

/// Deterministic RNG derived from `(seed, name)`.
pub struct SeedStream {
    rng: ChaCha12Rng,
}

impl SeedStream {
    pub fn new(seed: u64, name: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest[..32]);
        SeedStream { rng: ChaCha12Rng::from_seed(key) }
    }

    /// Child stream; `SeedStream::new(s, "a").child("b")` differs from
    /// `SeedStream::new(s, "b")`.
    pub fn child(&mut self, name: &str) -> SeedStream {
        let sub: u64 = self.rng.gen();
        SeedStream::new(sub, name)
    }

    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        Uniform::new(lo, hi).sample(&mut self.rng)
    }

    pub fn normal_f64(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).unwrap().sample(&mut self.rng)
    }

    pub fn gen_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        let dist = Uniform::new(lo, hi);
        let data = (0..numel).map(|_| T::from_f64(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, data)
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: Vec<usize>, mean: f64, std: f64) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(mean, std).unwrap();
        let data = (0..numel).map(|_| T::from_f64(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, data)
    }

    /// Normal(0, std) truncated to ±2 std by resampling.
    pub fn trunc_normal_tensor<T: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).unwrap();
        let bound = 2.0 * std;
        let data = (0..numel)
            .map(|_| {
                loop {
                    let v = dist.sample(&mut self.rng);
                    if v.abs() <= bound {
                        return T::from_f64(v);
                    }
                }
            })
            .collect();
        Tensor::new(shape, data)
    }
}
