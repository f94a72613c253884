//! Counter-based randomness.
//!
//! Every stochastic decision in the pipeline is a pure function of a key
//! tuple, so results never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered list of words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &w in words {
        h = splitmix64(h ^ splitmix64(w));
    }
    h
}

/// FNV-1a, used to turn identifiers into key words.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Uniform in [0, 1) with 53 bits.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stateless stream: `at(i)` is a pure function of `(key, i)`.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key }
    }

    #[inline]
    pub fn bits(&self, index: u64, lane: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(index.wrapping_mul(4).wrapping_add(lane)))
    }

    #[inline]
    pub fn uniform(&self, index: u64, lane: u64) -> f64 {
        unit_f64(self.bits(index, lane))
    }

    /// Standard normal via Box-Muller on two lanes.
    #[inline]
    pub fn normal(&self, index: u64, lane: u64) -> f64 {
        let u1 = 1.0 - self.uniform(index, 2 * lane);
        let u2 = self.uniform(index, 2 * lane + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// A seeded sequential generator for a keyed stream.
pub fn stream(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}
