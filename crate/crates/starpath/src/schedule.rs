//! Cyclic sampling with reshuffle.
//!
//! Every epoch `B` visits each of the `n` components exactly once, in the
//! order of a fresh random permutation `pi_B`. Iteration `k` decomposes as
//! `k = n*B + t`, and the sampled component is `pi_B(t+1)`.
//!
//! Component indices are 1-based in this module's public contract (matching
//! the `pi_B(t+1)` convention used everywhere downstream); callers into the
//! problem layer subtract one.
//!
//! Permutations come from per-epoch substreams keyed by `(seed, B)`, so any
//! epoch can be regenerated without replaying the ones before it. The
//! analyzer relies on that when it walks schedules out of order.

use crate::rng::Stream;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("component index {v} out of range 1..={n}")]
    IndexOutOfRange { v: u32, n: usize },
}

/// Fisher-Yates shuffle of `1..=n` from the `(seed, epoch)` substream.
pub fn permute(n: usize, seed: u64, epoch: u64) -> Vec<u32> {
    assert!(n >= 1, "permute: n must be positive");
    let mut stream = Stream::keyed(&[seed, epoch, 0x7065726d]); // "perm" tag
    let mut perm: Vec<u32> = (1..=n as u32).collect();
    for i in (1..n).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

/// Per-epoch permutations of `{1..n}`, regenerated on demand from the seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochSchedule {
    n: usize,
    seed: u64,
}

impl EpochSchedule {
    pub fn new(n: usize, seed: u64) -> Self {
        assert!(n >= 1, "EpochSchedule: n must be positive");
        EpochSchedule { n, seed }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The full permutation `pi_B` as a vector: entry `t` (0-based) holds
    /// `pi_B(t+1)`, a 1-based component index.
    pub fn permutation(&self, epoch: u64) -> Vec<u32> {
        permute(self.n, self.seed, epoch)
    }

    /// `xi_k = pi_B(t+1)` with `B = k div n`, `t = k mod n`. 1-based.
    pub fn sample_index(&self, k: u64) -> u32 {
        let epoch = k / self.n as u64;
        let t = (k % self.n as u64) as usize;
        self.permutation(epoch)[t]
    }

    /// The 1-based position `t+1` within epoch `B` at which component `v`
    /// is sampled, i.e. `pi_B(inverse_position(B, v)) == v`.
    pub fn inverse_position(&self, epoch: u64, v: u32) -> Result<u32, ScheduleError> {
        if v < 1 || v as usize > self.n {
            return Err(ScheduleError::IndexOutOfRange { v, n: self.n });
        }
        let perm = self.permutation(epoch);
        let pos = perm.iter().position(|&u| u == v).expect("bijection") as u32;
        Ok(pos + 1)
    }
}
