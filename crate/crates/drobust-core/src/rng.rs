//! Seeded, splittable random number streams.
//!
//! Every randomized operation in this crate takes an explicit `u64` seed and
//! derives the streams it needs through [`stream`] with a documented label,
//! so any result can be replayed exactly. Streams with distinct
//! (seed, label) pairs are statistically independent: the label feeds the
//! ChaCha stream counter after seed/label mixing, so there is no coupling
//! between, say, fold splits and reward noise even under the same seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels for the independent stream families used across the crate.
///
/// The numeric values are part of the reproducibility contract: changing them
/// changes every seeded result.
pub mod label {
    /// Cross-fitting fold assignment.
    pub const FOLDS: u64 = 1;
    /// Half-splits of fold complements.
    pub const HALF_SPLIT: u64 = 2;
    /// Environment state draws.
    pub const ENV_STATE: u64 = 3;
    /// Environment action draws.
    pub const ENV_ACTION: u64 = 4;
    /// Environment reward noise.
    pub const ENV_REWARD: u64 = 5;
    /// Nuisance model fitting (tie-breaks, tree randomization).
    pub const NUISANCE: u64 = 6;
    /// Policy initialization per restart.
    pub const RESTART: u64 = 7;
    /// Monte Carlo oracle draws.
    pub const ORACLE: u64 = 8;
}

/// SplitMix64 finalizer; bijective 64-bit mix.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed for a labeled sub-computation. Chains: a per-fold
/// stream is `stream(derive(seed, fold_index), label::...)`.
pub fn derive(seed: u64, label: u64) -> u64 {
    mix(seed ^ mix(label))
}

/// A counter-based generator for the given (seed, label) pair.
///
/// The seed selects the key and the label selects the stream, so all labeled
/// streams under one seed are mutually independent and any one of them can be
/// reconstructed without generating the others.
pub fn stream(seed: u64, label: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix(label));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_and_label_reproduce() {
        let a: [u64; 4] = stream(7, label::FOLDS).gen();
        let b: [u64; 4] = stream(7, label::FOLDS).gen();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_give_distinct_streams() {
        let a: u64 = stream(7, label::FOLDS).gen();
        let b: u64 = stream(7, label::HALF_SPLIT).gen();
        assert_ne!(a, b);
    }

    #[test]
    fn derive_separates_children() {
        assert_ne!(derive(7, 0), derive(7, 1));
        assert_ne!(derive(7, 0), derive(8, 0));
    }
}
