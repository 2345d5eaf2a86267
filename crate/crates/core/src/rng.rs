//! Keyed random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream identified by the
//! run seed and a stream key, so independent consumers never share state and
//! any of them can be regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream keys used across the crate. Batch streams add the batch index.
pub mod keys {
    pub const FEATURES: u64 = 1;
    pub const INIT: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const TRAIN_SET: u64 = 5;
    pub const GROUND_TRUTH: u64 = 6;
    pub const PERTURBATION: u64 = 7;
    pub const MINIBATCH: u64 = 8;
    pub const GENERATE: u64 = 9;
    /// Online batches use `ONLINE_BASE + step`.
    pub const ONLINE_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, key: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}
