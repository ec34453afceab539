//! Named-stream deterministic RNG.
//!
//! Every source of randomness in the crate (data generation, parameter init,
//! reparameterization noise, shuffling, probe fitting, ...) draws from its own
//! named substream of one master seed. Streams are mutually independent ChaCha
//! counters, so adding draws to one stream never perturbs another, and any
//! stream can be re-opened mid-run to reproduce its sequence exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// FNV-1a, 64-bit. Fixed here so stream derivation never changes underneath
/// saved seeds (std's `DefaultHasher` makes no cross-version guarantee).
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer, used to decorrelate (master_seed, stream hash).
fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// One substream of the master seed, identified by name.
#[derive(Clone, Debug)]
pub struct StreamRng {
    inner: ChaCha12Rng,
}

impl StreamRng {
    pub fn new(master_seed: u64, stream: &str) -> Self {
        let seed = mix(master_seed ^ mix(fnv1a64(stream.as_bytes())));
        StreamRng {
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.random_range(0..=i);
            xs.swap(i, j);
        }
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_name_same_sequence() {
        let mut a = StreamRng::new(7, "init/encoder.w0");
        let mut b = StreamRng::new(7, "init/encoder.w0");
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn different_names_diverge() {
        let mut a = StreamRng::new(7, "shuffle/e0");
        let mut b = StreamRng::new(7, "shuffle/e1");
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn different_masters_diverge() {
        let mut a = StreamRng::new(1, "data");
        let mut b = StreamRng::new(2, "data");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments_sane() {
        let mut rng = StreamRng::new(42, "moments");
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = StreamRng::new(3, "perm");
        let mut xs: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
