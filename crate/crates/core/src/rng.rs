//! PCG32 (XSH-RR 64/32) with splitmix64 seed expansion.
//!
//! `Rng::new(seed, stream)` seeds the reference PCG32 generator with
//! `initstate = splitmix64(seed)` and `initseq = stream`, so the output for a
//! given `(seed, stream)` pair is fixed on every platform.
//!
//! Forking derives a child generator from the parent's current state, its
//! increment and a caller-chosen label:
//!
//! ```text
//! child.initstate = splitmix64(state ^ splitmix64(label))
//! child.initseq   = splitmix64(inc ^ label.rotate_left(32))
//! ```
//!
//! Distinct labels give distinct increments, and PCG32 generators with
//! distinct increments produce distinct sequences. Forking does not advance
//! the parent.

use alloc::vec::Vec;

use crate::error::{param_err, Result};

const PCG_MULT: u64 = 6_364_136_223_846_793_005;

/// One step of splitmix64 starting from `x`; returns the mixed output.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
    inc: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::from_pcg_seed(splitmix64(seed), stream)
    }

    /// Reference `pcg32_srandom_r(initstate, initseq)` seeding.
    pub fn from_pcg_seed(initstate: u64, initseq: u64) -> Self {
        let mut rng = Self {
            state: 0,
            inc: (initseq << 1) | 1,
        };
        rng.step();
        rng.state = rng.state.wrapping_add(initstate);
        rng.step();
        rng
    }

    pub fn fork(&self, label: u64) -> Self {
        let initstate = splitmix64(self.state ^ splitmix64(label));
        let initseq = splitmix64(self.inc ^ label.rotate_left(32));
        Self::from_pcg_seed(initstate, initseq)
    }

    fn step(&mut self) {
        self.state = self.state.wrapping_mul(PCG_MULT).wrapping_add(self.inc);
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.step();
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_u64(&mut self) -> u64 {
        let hi = u64::from(self.next_u32());
        let lo = u64::from(self.next_u32());
        (hi << 32) | lo
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, bound)` by rejection sampling.
    pub fn next_below(&mut self, bound: usize) -> Result<usize> {
        if bound == 0 || bound > u32::MAX as usize {
            return Err(param_err!("bound {} outside 1..=u32::MAX", bound));
        }
        let bound = bound as u32;
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return Ok((r % bound) as usize);
            }
        }
    }

    /// Uniformly random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Result<Vec<usize>> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_below(i + 1)?;
            perm.swap(i, j);
        }
        Ok(perm)
    }

    /// `count` distinct values from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, count: usize) -> Result<Vec<usize>> {
        if count > n {
            return Err(param_err!("cannot choose {} distinct values from {}", count, n));
        }
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.next_below(n - i)?;
            pool.swap(i, j);
        }
        pool.truncate(count);
        Ok(pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matches_pcg32_reference() {
        // pcg32-global demo, srandom(42, 54)
        let mut rng = Rng::from_pcg_seed(42, 54);
        let got: Vec<u32> = (0..6).map(|_| rng.next_u32()).collect();
        assert_eq!(
            got,
            vec![0xa15c02b7, 0x7b47f409, 0xba1d3330, 0x83d2f293, 0xbfa4784b, 0xcbed606e]
        );
    }

    #[test]
    fn matches_splitmix64_reference() {
        let mut x: u64 = 1_234_567;
        let mut got = Vec::new();
        for _ in 0..5 {
            got.push(splitmix64(x));
            x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        }
        assert_eq!(
            got,
            vec![
                6457827717110365317,
                3203168211198807973,
                9817491932198370423,
                4593380528125082431,
                16408922859458223821
            ]
        );
    }

    #[test]
    fn bound_one_is_zero() {
        let mut rng = Rng::new(3, 0);
        assert!((0..100).all(|_| rng.next_below(1).unwrap() == 0));
        assert!(rng.next_below(0).is_err());
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(99, 5);
        let mut b = Rng::new(99, 5);
        for _ in 0..100 {
            assert_eq!(a.next_below(1000).unwrap(), b.next_below(1000).unwrap());
        }
    }

    #[test]
    fn bucket_frequencies() {
        let mut rng = Rng::new(2024, 1);
        let mut counts = [0usize; 8];
        let draws = 100_000;
        for _ in 0..draws {
            counts[rng.next_below(8).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.125).abs() < 0.01);
        }
    }

    #[test]
    fn fork_does_not_advance_parent() {
        let parent = Rng::new(1, 2);
        let before = parent.clone();
        let _ = parent.fork(17);
        assert_eq!(parent, before);
    }

    #[test]
    fn choose_distinct_is_distinct() {
        let mut rng = Rng::new(4, 4);
        let mut picked = rng.choose_distinct(10, 10).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, (0..10).collect::<Vec<_>>());
        assert!(rng.choose_distinct(3, 4).is_err());
    }
}
