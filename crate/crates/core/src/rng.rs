//! xorshift64* pseudo-random stream.
//!
//! Every seeded operation in the crate (reference weights, SmoothGrad noise,
//! LIME feature sampling, k-means seeding, benchmark inputs) draws from this
//! generator so that results can be reproduced bit-for-bit in any language:
//!
//! ```text
//! state = seed            (0 is replaced by 0x9E3779B97F4A7C15)
//! next:  x ^= x >> 12; x ^= x << 25; x ^= x >> 27; state = x
//!        return x * 0x2545F4914F6CDD1D   (wrapping)
//! uniform in [0, 1): (next >> 11) / 2^53
//! normal: Box-Muller on two uniforms, cosine branch only
//! ```

#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

const ZERO_SEED_REPLACEMENT: u64 = 0x9E37_79B9_7F4A_7C15;

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let state = if seed == 0 { ZERO_SEED_REPLACEMENT } else { seed };
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Fair coin from the top bit.
    pub fn next_bit(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    /// Standard normal sample.
    pub fn next_normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1]
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }
}
