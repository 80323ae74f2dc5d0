//! Deterministic random streams.
//!
//! All chains in a run share one master seed; chain `i` draws from ChaCha
//! stream `i` of that seed. ChaCha supports 2^64 independent streams, so the
//! mapping `(master_seed, index) -> stream` never needs a hash and two runs
//! with the same seed consume identical numbers regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(master_seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Derive a child seed for a named sub-task (for example the a0 lattice of an
/// experiment) so that sub-tasks do not share streams with the chains.
pub fn child_seed(master_seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = master_seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
