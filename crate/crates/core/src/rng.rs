//! Seed derivation and named random streams.
//!
//! Every source of randomness in a run is a separate ChaCha8 stream keyed by
//! `(seed, purpose, index)`, so adding or removing one consumer never shifts
//! the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// One round of the splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Mixes a seed with a textual tag. Stable across platforms and toolchains.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(tag.as_bytes())))
}

/// [`derive_seed`] limited to 63 bits, so the result fits the signed
/// integers of text config formats.
pub fn derive_config_seed(seed: u64, tag: &str) -> u64 {
    derive_seed(seed, tag) & i64::MAX as u64
}

/// A deterministic stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let s = splitmix64(derive_seed(seed, purpose) ^ splitmix64(index.wrapping_add(1)));
    ChaCha8Rng::seed_from_u64(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "private", 0).random();
        let b: u64 = stream(7, "private", 0).random();
        let c: u64 = stream(7, "private", 1).random();
        let d: u64 = stream(7, "public", 0).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn derive_seed_depends_on_tag() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
    }
}
