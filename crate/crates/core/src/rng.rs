//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from a tuple of integers (global seed, replicate, cluster, ...).
//! Re-running one part of the computation, such as a leave-one-out refit or
//! an oracle rerun, therefore never shifts the draws used anywhere else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of keys into one 64-bit seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// A ChaCha8 generator keyed by `seed` and positioned on `stream`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_depend_on_every_key() {
        let a = derive_seed(2024, &[1, 2]);
        assert_ne!(a, derive_seed(2024, &[2, 1]));
        assert_ne!(a, derive_seed(2025, &[1, 2]));
        assert_eq!(a, derive_seed(2024, &[1, 2]));
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let x: u64 = stream(7, 0).random();
        let y: u64 = stream(7, 1).random();
        assert_ne!(x, y);
        assert_eq!(x, stream(7, 0).random::<u64>());
    }
}
