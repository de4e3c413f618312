//! Pinned randomness primitives.
//!
//! Everything that needs reproducible randomness goes through the two
//! functions in this module, so another implementation can reproduce every
//! shuffle and every round plan bit-for-bit:
//!
//! * [`SplitMix64`] is the generator. State update `s += 0x9E3779B97F4A7C15`,
//!   output mix `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^ (z >> 31)`.
//! * [`SplitMix64::below`] maps a draw onto `0..n` with the multiply-high
//!   reduction `(draw as u128 * n as u128) >> 64`.
//! * [`derive_seed`] is the stable 64-bit hash: SHA-256 over a tagged,
//!   length-prefixed encoding of its parts, first 8 digest bytes read
//!   little-endian.

use sha2::{Digest, Sha256};

/// SplitMix64 generator (Steele, Lea, Flood 2014).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// One component of a [`derive_seed`] input.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    U64(u64),
    Str(&'a str),
}

/// Stable 64-bit hash of a domain tag plus an ordered list of parts.
///
/// Encoding: `tag bytes || 0x00`, then per part a type byte (`0x01` for u64,
/// `0x02` for string), followed by the u64 as 8 little-endian bytes or the
/// string's byte length as 8 little-endian bytes and its UTF-8 bytes.
pub fn derive_seed(tag: &str, parts: &[SeedPart<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update([0u8]);
    for part in parts {
        match part {
            SeedPart::U64(v) => {
                hasher.update([1u8]);
                hasher.update(v.to_le_bytes());
            }
            SeedPart::Str(s) => {
                hasher.update([2u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}
