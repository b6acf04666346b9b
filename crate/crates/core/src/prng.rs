//! Counter-based pseudorandom generator shared by every party in the protocol.
//!
//! Cross-party artifacts (the public projection matrix, pairwise aggregation
//! masks, synthetic draws) must be regenerable bit-exactly from a seed alone,
//! so the generator is pinned down completely here rather than delegated to a
//! library whose stream may change between versions:
//!
//! * `word(seed, ctr)` is the SplitMix64 output function applied to the state
//!   `seed + (ctr + 1) * 0x9E3779B97F4A7C15` (wrapping arithmetic throughout).
//! * `uniform(seed, ctr)` maps the top 53 bits of `word` to `(0, 1]` via
//!   `(bits + 1) * 2^-53`.
//! * `normal(seed, ctr)` is the cosine branch of the Box–Muller transform on
//!   the uniforms at counters `2*ctr` and `2*ctr + 1`:
//!   `sqrt(-2 ln u1) * cos(2 pi u2)`.
//!
//! Distinct streams are derived by mixing a context value into the seed with
//! `split`, which is `mix64` of the xor of the two halves.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a parent seed and a context tag.
#[inline]
pub fn split(seed: u64, context: u64) -> u64 {
    mix64(seed ^ mix64(context.wrapping_mul(GOLDEN_GAMMA).wrapping_add(1)))
}

/// The `ctr`-th 64-bit word of the stream identified by `seed`.
#[inline]
pub fn word(seed: u64, ctr: u64) -> u64 {
    mix64(seed.wrapping_add(ctr.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Uniform draw in the half-open interval `(0, 1]`.
#[inline]
pub fn uniform(seed: u64, ctr: u64) -> f64 {
    ((word(seed, ctr) >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw (Box–Muller, cosine branch).
#[inline]
pub fn normal(seed: u64, ctr: u64) -> f64 {
    let u1 = uniform(seed, 2 * ctr);
    let u2 = uniform(seed, 2 * ctr + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// FNV-1a 64-bit hash, used for artifact fingerprints.
#[derive(Debug, Clone)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xCBF2_9CE4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_deterministic() {
        assert_eq!(word(42, 0), word(42, 0));
        assert_ne!(word(42, 0), word(42, 1));
        assert_ne!(word(42, 0), word(43, 0));
    }

    #[test]
    fn uniform_stays_in_half_open_unit_interval() {
        for ctr in 0..10_000 {
            let u = uniform(7, ctr);
            assert!(u > 0.0 && u <= 1.0);
        }
    }

    #[test]
    fn normal_moments_match_standard_gaussian() {
        let n = 200_000usize;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for ctr in 0..n {
            let z = normal(123, ctr as u64);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn split_separates_contexts() {
        assert_ne!(split(1, 0), split(1, 1));
        assert_ne!(split(1, 0), split(2, 0));
    }
}
