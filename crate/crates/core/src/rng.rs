//! Counter-based random streams.
//!
//! Every random decision in the toolkit is addressed by `(seed, stream,
//! index)`. ChaCha is a counter-mode generator, so jumping to a word
//! position is O(1) and any worker can reproduce any draw without replaying
//! the ones before it.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids used by the different consumers of randomness.
pub mod streams {
    pub const LANGUAGE_DRAWS: u64 = 1;
    pub const CONSTRAINT_FLAGS: u64 = 2;
    pub const INIT: u64 = 3;
    pub const GRAD_CHECK: u64 = 4;
    pub const SYNTHETIC: u64 = 5;
}

#[derive(Clone, Debug)]
pub struct CounterRng {
    inner: ChaCha8Rng,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// The `index`-th 64-bit word of this stream.
    pub fn u64_at(&mut self, index: u64) -> u64 {
        // Two 32-bit words per u64.
        self.inner.set_word_pos(u128::from(index) * 2);
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn unit_at(&mut self, index: u64) -> f64 {
        (self.u64_at(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Sequential draw from the current position.
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is < n / 2^64 and irrelevant here.
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_unit();
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Derives a sub-seed for an indexed unit of work (a sequence, a shard).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    CounterRng::new(seed, stream).u64_at(index)
}

/// 64-bit FNV-1a, used for document-id hashes in the packed format.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential() {
        let mut a = CounterRng::new(7, 1);
        let seq: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let mut b = CounterRng::new(7, 1);
        for i in (0..16).rev() {
            assert_eq!(b.u64_at(i as u64), seq[i]);
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = CounterRng::new(7, 1);
        let mut b = CounterRng::new(7, 2);
        assert_ne!(a.u64_at(0), b.u64_at(0));
    }

    #[test]
    fn unit_range() {
        let mut r = CounterRng::new(1, 0);
        for i in 0..1000 {
            let u = r.unit_at(i);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn fnv_known_vector() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
