//! Seed streams.
//!
//! Every stochastic consumer in a run draws from its own ChaCha8 stream of
//! the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Per-classifier streams add the classifier index.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const DMC_BATCHES: u64 = 1;
    pub const EVAL_PAIRING: u64 = 2;
    pub const AUDIT: u64 = 3;
    pub const GRADCHECK: u64 = 4;
    pub const CLASSIFIER_BATCHES: u64 = 1 << 8;
    pub const JITTER: u64 = 2 << 8;
    pub const PAIRING: u64 = 3 << 8;
    pub const THRESHOLD: u64 = 1 << 16;
    pub const SYNTH: u64 = 1 << 20;
    /// Set on the target-domain half of a paired batch stream.
    pub const TARGET_SIDE: u64 = 1 << 32;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
