//! Single named PRNG stream for the whole crate: ChaCha8 seeded from a u64,
//! normals via the ziggurat sampler. All randomness (init, shuffles, sampling,
//! k-means seeding) flows through [`Rng`] so a seed pins every artifact bit
//! for bit. Child streams are derived with [`Rng::derive`] rather than by
//! sharing one stream across independent jobs.

use crate::tensor::Tensor;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Name recorded in manifests and checkpoints so artifacts state how their
/// random numbers were produced.
pub const ALGORITHM: &str = "chacha8";

/// FNV-1a on the UTF-8 bytes of `s`. Used to derive child seeds from string
/// tags; stable by construction (unlike `DefaultHasher`).
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn from_seed(seed: u64) -> Rng {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent child stream for the job named `tag` under `base_seed`.
    pub fn derive(base_seed: u64, tag: &str) -> Rng {
        Rng::from_seed(base_seed ^ fnv1a64(tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform on [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn normal_scaled(&mut self, mu: f64, sigma: f64) -> f64 {
        mu + sigma * self.normal()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Tensor::from_vec(shape, data)
    }

    /// True with probability `p`; consumes exactly one u64.
    pub fn coin(&mut self, p: f64) -> bool {
        assert!((0.0..=1.0).contains(&p), "coin: p = {} outside [0, 1]", p);
        self.uniform() < p
    }

    /// Uniform integer in [0, n). Rejection sampling, modulo-bias free.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below: empty range");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle with a pinned draw sequence.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Shuffled index vector `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
