//! Deterministic pseudo-random streams.
//!
//! All randomness in the crate flows through [`Stream`], a splitmix64
//! generator. Because splitmix64 is a pure mix of an additive counter, a
//! stream keyed by `(seed, epoch)` can be opened at any epoch without
//! replaying earlier ones, which is what the schedule module needs for
//! random-access permutation queries.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer: bijective mix of a 64-bit word.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic splitmix64 stream.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
    cached_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            state: mix64(seed ^ GOLDEN_GAMMA),
            cached_normal: None,
        }
    }

    /// Opens a substream keyed by a sequence of words. Distinct key
    /// sequences give statistically independent streams.
    pub fn keyed(words: &[u64]) -> Self {
        let mut s = 0xcbf2_9ce4_8422_2325u64; // FNV-ish fold
        for &w in words {
            s = mix64(s ^ mix64(w.wrapping_add(GOLDEN_GAMMA)));
        }
        Stream {
            state: s,
            cached_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased uniform integer in `[0, bound)` via rejection sampling.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below: bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Standard normal via Box-Muller; caches the paired draw.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.cached_normal.take() {
            return v;
        }
        loop {
            let u1 = self.next_f64();
            let u2 = self.next_f64();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            self.cached_normal = Some(r * theta.sin());
            return r * theta.cos();
        }
    }
}
