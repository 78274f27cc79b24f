//! Seed derivation and stream construction. Every random stream in the crate
//! is a ChaCha8 generator keyed by a seed derived from the master seed and
//! one or two stream indices, so replications are independent, reproducible,
//! and insensitive to scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer: a full-avalanche mix of a 64-bit word.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for stream `index` under `master`. Mixing keeps nearby indices
/// uncorrelated; documented so runs can be reproduced outside this crate.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ index.wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Two-level derivation (e.g. grid position, then replication id).
pub fn derive_seed2(master: u64, a: u64, b: u64) -> u64 {
    derive_seed(derive_seed(master, a), b)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_deterministic_and_index_sensitive() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(7, 4));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
        assert_ne!(derive_seed2(7, 1, 2), derive_seed2(7, 2, 1));
    }

    #[test]
    fn streams_with_equal_seeds_agree() {
        use rand::Rng;
        let mut a = rng_from(derive_seed(99, 0));
        let mut b = rng_from(derive_seed(99, 0));
        for _ in 0..32 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }
}
