//! Seed derivation for reproducible runs.
//!
//! Every random draw in the crate flows through a `ChaCha8Rng` whose seed is
//! derived from the run seed, a stream label and an index. Derivation uses
//! splitmix64 so sub-streams are decorrelated and stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels, one per consumer of randomness.
pub mod stream {
    pub const PARAM_INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DOWNSAMPLE: u64 = 4;
    pub const GENERATE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const BOOTSTRAP: u64 = 7;
    pub const BOOTSTRAP_REDRAW: u64 = 8;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a sub-seed from `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

/// RNG for one `(master, stream, index)` triple.
pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
