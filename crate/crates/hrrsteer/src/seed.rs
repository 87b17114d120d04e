//! Seed splitting.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is
//! derived from a master seed and a label: `mix(master ^ fnv1a(label))`.
//! Labels are symbol names ("digit1", "n2", "type:gcd"), layer names, or
//! problem ids, so adding a new consumer never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a hash of a byte string.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer; a bijection on u64 with good avalanche.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a label.
pub fn derive(master: u64, label: &str) -> u64 {
    mix64(master ^ fnv1a(label.as_bytes()))
}

/// Derive a child seed from a master seed and an integer index.
pub fn derive_index(master: u64, label: &str, index: u64) -> u64 {
    mix64(derive(master, label) ^ mix64(index))
}

/// Deterministic generator for a (master, label) pair.
pub fn rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, label))
}

/// Deterministic generator from an already derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_values() {
        // Reference values of the published FNV-1a 64-bit test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn labels_split_streams() {
        assert_ne!(derive(7, "digit1"), derive(7, "ones"));
        assert_ne!(derive(7, "digit1"), derive(8, "digit1"));
        assert_eq!(derive(7, "digit1"), derive(7, "digit1"));
        assert_ne!(derive_index(1, "p", 0), derive_index(1, "p", 1));
    }
}
