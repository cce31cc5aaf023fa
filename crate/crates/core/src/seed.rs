//! Stable seed derivation. Everything random in the crate is driven by a
//! ChaCha stream whose seed is derived here from a master seed and a tuple of
//! integer coordinates, so results do not depend on thread count or on the
//! order in which units are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and one coordinate.
pub fn mix(seed: u64, coord: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ coord.wrapping_mul(GOLDEN).rotate_left(17))
}

pub fn mix2(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(seed, a), b)
}

/// FNV-1a over the UTF-8 bytes; stable across platforms and releases.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
