//! Seeded random streams.
//!
//! Every consumer of randomness asks for a `(seed, stream)` pair. ChaCha
//! supports 2^64 independent streams per key, so tasks that run in parallel
//! (replications, trajectories, folds) never share a generator and the
//! output does not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named stream offsets so unrelated tasks never collide on the same stream.
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const FEATURES: u64 = 2;
    pub const ORACLE: u64 = 3;
    pub const TEST: u64 = 4;
}

/// Generator for `stream` under key `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Combine a base stream tag with a sub-index (trajectory, fold, ...).
pub fn sub_stream(stream: u64, index: u64) -> u64 {
    stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index
}
