//! Pinned randomness: ChaCha8 counter-based streams plus Box-Muller normals.
//!
//! Every random draw in the crate flows through this module so that cohorts,
//! weight initializations and training runs are reproducible bit-for-bit from
//! a seed, independent of the host platform. The algorithms are fixed here:
//! ChaCha8 for the raw stream, 53-bit uniforms, Box-Muller for gaussians.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash, used to derive named substreams from a base seed.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; mixes a seed with a stream label into a new seed.
fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.rotate_left(31);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream of uniforms and gaussians.
pub struct Stream {
    rng: ChaCha8Rng,
    cached_normal: Option<f64>,
}

impl Stream {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached_normal: None,
        }
    }

    /// Named substream, independent of any other name under the same seed.
    pub fn named(seed: u64, name: &str) -> Self {
        Stream::new(mix(seed, fnv1a(name.as_bytes())))
    }

    /// Indexed substream, e.g. one per patient.
    pub fn indexed(seed: u64, index: u64) -> Self {
        Stream::new(mix(seed, index.wrapping_mul(0xa076_1d64_78bd_642f)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    pub fn uniform_open(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal with the given standard deviation.
    pub fn normal_scaled(&mut self, std: f64) -> f64 {
        self.normal() * std
    }

    /// Exponential with the given rate.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -self.uniform_open().ln() / rate
    }

    /// Vector of gaussians.
    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal_scaled(std)).collect()
    }
}
