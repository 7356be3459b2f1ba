//! Seed derivation. All randomness in the crate descends from one master seed.
//!
//! A child seed is `splitmix64(parent ^ splitmix64(tag))`, applied once per tag
//! in order. The mixing is the finalizer of the SplitMix64 generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(master, |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}

/// Stream tags, kept distinct so that independent consumers never share draws.
pub mod stream {
    pub const PHANTOM_GEOMETRY: u64 = 1;
    pub const PHANTOM_NOISE: u64 = 2;
    pub const FOLDS: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const STEP: u64 = 6;
    pub const ADAON: u64 = 7;
    pub const ENCODER: u64 = 8;
    pub const DATASET: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_deterministic_and_tag_sensitive() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
    }

    #[test]
    fn splitmix_reference_value() {
        // first output of SplitMix64 seeded with 0
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
