//! Bit-exact mixing, rolling prefix hash and the seeded random stream.
//!
//! Every constant here is part of the cross-implementation contract (see
//! `docs/hashing.md`). Changing any of them changes every logit, every
//! sampled token and every [`crate::logits_cache::StateKey`].

use crate::Token;

/// Weyl increment of SplitMix64 (2^64 / golden ratio).
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Initial value of the rolling prefix hash (FNV-1a 64-bit offset basis).
pub const PREFIX_HASH_INIT: u64 = 0xCBF2_9CE4_8422_2325;

/// Salt xor-ed into the context word to pick the peaked vocabulary id.
pub const PEAK_SALT: u64 = 0xD6E8_FEB8_6659_FD93;

const UNIT_SCALE: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 finalizer ("mix13" variant). A bijection on `u64`.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Maps the top 53 bits of `x` onto `[0, 1)`.
#[inline]
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * UNIT_SCALE
}

/// Incremental hash over a token sequence.
///
/// `h_0 = PREFIX_HASH_INIT`, `h_{i+1} = mix64(h_i ^ (t_i + 1) * GOLDEN_GAMMA)`.
/// The value after the last token identifies the whole prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PrefixHash(u64);

impl Default for PrefixHash {
    fn default() -> Self {
        Self(PREFIX_HASH_INIT)
    }
}

impl PrefixHash {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn of(tokens: &[Token]) -> Self {
        let mut h = Self::new();
        h.extend(tokens);
        h
    }

    #[inline]
    pub fn push(&mut self, token: Token) {
        let word = (u64::from(token) + 1).wrapping_mul(GOLDEN_GAMMA);
        self.0 = mix64(self.0 ^ word);
    }

    pub fn extend(&mut self, tokens: &[Token]) {
        for &t in tokens {
            self.push(t);
        }
    }

    #[inline]
    pub fn pushed(mut self, token: Token) -> Self {
        self.push(token);
        self
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

/// SplitMix64 generator: `state += GOLDEN_GAMMA; return mix64(state)`.
///
/// One stream per request. Sampling consumes exactly one `next_f64` per
/// sampled token, so replay and recompute stay aligned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    state: u64,
    draws: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            draws: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        self.draws += 1;
        mix64(self.state)
    }

    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Number of values drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }
}

/// Derives a child seed from a parent seed and a sequence of labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix64(seed ^ GOLDEN_GAMMA), |acc, &l| {
        mix64(acc ^ mix64(l.wrapping_add(GOLDEN_GAMMA)))
    })
}
