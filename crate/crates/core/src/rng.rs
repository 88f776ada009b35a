//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8, a counter-based
//! generator whose output is fixed by (seed, stream, word position) on every
//! platform. Distinct consumers of the same user seed select distinct streams
//! so that, for example, scene generation and degradation noise never share
//! samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers for the independent consumers of a seed.
pub mod streams {
    pub const SCENE_LAYOUT: u64 = 1;
    pub const SCENE_JITTER: u64 = 2;
    pub const DEGRADATION: u64 = 3;
    pub const PATCH_SPLIT: u64 = 4;
    pub const WEIGHT_INIT: u64 = 5;
    pub const TRAIN_SPLIT: u64 = 6;
    pub const TRAIN_SHUFFLE: u64 = 7;
    pub const SUBSAMPLE: u64 = 8;
    /// Dropout masks use `DROPOUT_BASE + call_index`.
    pub const DROPOUT_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
