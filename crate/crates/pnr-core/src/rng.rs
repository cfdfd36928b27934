//! Seed handling shared by the stochastic modules.
//!
//! One master seed fans out into independent generators two ways: cheap
//! stream selection for items of a homogeneous batch (pulses, restarts) and
//! splitmix-derived child seeds for nested stages that need their own seed
//! space. Both are pure functions of `(seed, index)`, which is what makes
//! every parallel loop in this crate schedule-independent.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for stream `stream` of the batch keyed by `seed`.
///
/// Streams of the same seed are statistically independent, so a parallel
/// loop can hand stream `i` to work item `i` and produce results that do not
/// depend on how items were scheduled.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive an independent child seed for nested stage `tag` (splitmix64 step).
pub(crate) fn child_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
