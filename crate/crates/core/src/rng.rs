//! Seeded random streams.
//!
//! Every independent unit of work (a simulated case, a dropout mask, an
//! epoch shuffle) owns its own ChaCha stream addressed by `(seed, stream)`,
//! so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// A stream keyed by a 64-bit seed and a 64-bit stream index.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derive a sub-seed from a seed and a domain tag so unrelated consumers of
/// the same user seed do not share streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
