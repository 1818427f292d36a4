//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a seed
//! derived from a master seed and a stream index, so results never depend on
//! the order in which work units execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based child seed for `(master, index)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let a = mix64(master.wrapping_add(0x9E37_79B9_7F4A_7C15));
    mix64(a ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(0x632B_E59B_D9B4_E019))
}

/// Generator for stream `index` under `master`.
pub fn stream(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

// Stream tags used across modules. Keeping them in one place avoids accidental
// reuse of the same stream for two purposes.
pub(crate) const STREAM_FOLDS: u64 = 0xF01D;
pub(crate) const STREAM_COVARIATES: u64 = 0xC0;
pub(crate) const STREAM_EXPOSURE_COEFS: u64 = 0xBE;
pub(crate) const STREAM_OUTCOME_COEFS: u64 = 0xA1;
pub(crate) const STREAM_OUTCOME: u64 = 0x0C;
pub(crate) const STREAM_EXPOSURE: u64 = 0xE0;
pub(crate) const STREAM_NOISE: u64 = 0x4E;
pub(crate) const STREAM_SYNTHETIC: u64 = 0x5C;
