//! Deterministic derivation of per-stage RNG seeds from one master seed.
//!
//! Every randomized stage draws from its own stream, derived from the master
//! seed and a stage tag. Stages therefore stay reproducible independently of
//! how many draws their neighbors consume, and data-parallel work can seed
//! each item without sharing an RNG.

/// SplitMix64 finalizer; a well-mixed 64-bit permutation.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from `master` and a stage `tag`.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag))
}

/// Derives an independent seed from `master` and two tags (e.g. stage and
/// item index).
pub fn derive_seed2(master: u64, tag_a: u64, tag_b: u64) -> u64 {
    derive_seed(derive_seed(master, tag_a), tag_b)
}
