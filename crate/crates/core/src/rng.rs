//! Seed derivation for every random stream in the simulator.
//!
//! All randomness flows from a single master seed. Sub-streams are keyed by a
//! tuple of integers (round, client, epoch, ...) which is folded through the
//! SplitMix64 finalizer, so any stream can be regenerated without replaying
//! the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`: `h = splitmix64(h ^ part)` for each part in order.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |h, &p| splitmix64(h ^ p))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags keep sub-seeds for different purposes disjoint.
pub mod stream {
    pub const SAMPLE_CLIENTS: u64 = 1;
    pub const LOCAL_TRAIN: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const ADAPTER_INIT: u64 = 4;
    pub const UNLEARN: u64 = 5;
    pub const REQUESTS: u64 = 6;
    pub const WORLD: u64 = 7;
    pub const PARTITION: u64 = 8;
    pub const FORGET: u64 = 9;
}
