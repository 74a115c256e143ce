//! Seeded counter-style RNG used everywhere determinism matters.
//!
//! SplitMix64 is small, fast, and has no cross-crate version hazards, so
//! identical seeds reproduce identical byte streams on every platform.

/// SplitMix64 generator (Steele, Lea, Flood 2014 constants).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent stream from (seed, stream_id). Distinct ids give
    /// decorrelated sequences, the property generation sessions rely on.
    pub fn stream(seed: u64, stream_id: u64) -> Self {
        let mut mixer = SplitMix64::new(seed ^ stream_id.wrapping_mul(0x9E3779B97F4A7C15));
        // One warm-up scramble so nearby (seed, id) pairs diverge immediately.
        let s = mixer.next_u64();
        SplitMix64::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval (0, 1); safe to feed to ln().
    pub fn next_open01(&mut self) -> f64 {
        (((self.next_u64() >> 11) | 1) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}
