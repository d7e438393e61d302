//! Seeded pseudo-random generation.
//!
//! Every sampling step in the crate draws from [`SplitMix64`] so that runs are
//! reproducible from a single 64-bit seed.

use rand::SeedableRng;

pub use rand_xoshiro::SplitMix64;

/// Generator for `seed`.
pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Generator for a named sub-stream of `seed`, so independent consumers of the
/// same seed do not share draws.
pub fn substream(seed: u64, stream: u64) -> SplitMix64 {
    // golden-ratio increment, same constant splitmix64 uses internally
    SplitMix64::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
