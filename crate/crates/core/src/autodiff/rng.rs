//! Counter-based random streams for dropout masks and initialisation.
//!
//! A stream is addressed by `(seed, stream id, counter)`. The same address
//! always yields the same 64-bit word, and distinct stream ids select
//! disjoint ChaCha8 keystreams.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RNG_ALGORITHM: &str = "chacha8";

/// Well-known stream ids.
pub mod streams {
    pub const DROPOUT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DATA: u64 = 0x100;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::at(seed, stream, 0)
    }

    /// Reopen a stream at a recorded counter.
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        // each u64 consumes two 32-bit words
        inner.set_word_pos(u128::from(counter) * 2);
        RngStream {
            seed,
            stream,
            counter,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent stream sharing this stream's seed.
    pub fn fork(&self, stream: u64) -> RngStream {
        RngStream::new(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` (n > 0), by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            idx.swap(i, j);
        }
        idx
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        StandardNormal.sample(self)
    }
}

/// Every word is routed through [`RngStream::next_u64`] so that distribution
/// samplers advance the recorded counter.
impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (RngStream::next_u64(self) >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        RngStream::next_u64(self)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let word = RngStream::next_u64(self).to_le_bytes();
            chunk.copy_from_slice(&word[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_output() {
        let mut a = RngStream::new(42, 7);
        let first: Vec<u64> = (0..10).map(|_| a.next_u64()).collect();
        let mut b = RngStream::at(42, 7, 4);
        assert_eq!(b.next_u64(), first[4]);
        assert_eq!(a.counter(), 10);
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(1, 1);
        let mut b = RngStream::new(1, 2);
        let xa: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert!(xa.iter().all(|v| !xb.contains(v)));
    }

    #[test]
    fn unit_interval() {
        let mut r = RngStream::new(3, 0);
        for _ in 0..10_000 {
            let u = r.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn permutation_is_bijection() {
        let mut r = RngStream::new(9, 3);
        let mut p = r.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
