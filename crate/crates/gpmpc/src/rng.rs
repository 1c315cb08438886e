//! Seeded random streams for the simulation and training pipeline.
//!
//! All stochastic behaviour in the crate flows through [`NoiseRng`]: a
//! ChaCha8 counter-based stream plus an explicit Box-Muller transform.
//! Keeping the transform explicit (rather than relying on a library
//! sampler) pins the exact draw sequence, so a (config, seed) pair fully
//! determines every output and other implementations can replay the
//! stream from the description alone.

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// The generator name accepted in configs.
pub const GENERATOR_NAME: &str = "chacha8";

/// SplitMix64 mix of a base seed and a sub-task label, so nearby labels
/// do not produce correlated streams.
pub fn mix_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic noise stream. Each standard-normal draw consumes exactly
/// two 64-bit words (Box-Muller, cosine branch only).
#[derive(Debug, Clone)]
pub struct NoiseRng {
    inner: ChaCha8Rng,
}

impl NoiseRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream for a sub-task (restart index, axis,
    /// run number).
    pub fn derive(seed: u64, label: u64) -> Self {
        Self::seed_from_u64(mix_seed(seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in (0, 1].
    pub fn uniform(&mut self) -> f64 {
        // 53 mantissa bits; map to (0, 1] so log() below is always finite.
        let bits = self.inner.next_u64() >> 11;
        (bits as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal via Box-Muller. Consumes two words.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vector3(&mut self) -> Vector3<f64> {
        Vector3::new(
            self.standard_normal(),
            self.standard_normal(),
            self.standard_normal(),
        )
    }

    /// Uniformly distributed unit vector (three normals, normalized).
    pub fn random_axis(&mut self) -> Vector3<f64> {
        let v = self.normal_vector3();
        let n = v.norm();
        if n < 1e-12 {
            Vector3::z()
        } else {
            v / n
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = NoiseRng::seed_from_u64(7);
        let mut b = NoiseRng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ_from_base_and_each_other() {
        let mut base = NoiseRng::seed_from_u64(7);
        let mut d0 = NoiseRng::derive(7, 0);
        let mut d1 = NoiseRng::derive(7, 1);
        let (a, b, c) = (base.next_u64(), d0.next_u64(), d1.next_u64());
        assert_ne!(a, b);
        assert_ne!(b, c);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = NoiseRng::seed_from_u64(42);
        let n = 200_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.standard_normal();
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn uniform_stays_in_half_open_interval() {
        let mut rng = NoiseRng::seed_from_u64(3);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!(u > 0.0 && u <= 1.0);
        }
    }
}
