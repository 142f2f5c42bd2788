//! Seeded randomness.
//!
//! Every random draw in the crate comes from SplitMix64 (64-bit state),
//! seeded by hashing a base seed together with a string key such as an
//! utterance id. Streams keyed this way are independent of generation order
//! and identical on every platform.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn keyed_rng(seed: u64, key: &str) -> SplitMix64 {
    let mut buf = seed.to_le_bytes().to_vec();
    buf.extend_from_slice(key.as_bytes());
    SplitMix64::seed_from_u64(fnv1a(&buf))
}

pub fn seeded_rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}
