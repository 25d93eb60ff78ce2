//! Derivation of independent, reproducible random streams.
//!
//! Every random decision in a run draws from a stream keyed by the run seed
//! and a short tag path such as `(PARTITION, task)` or `(CLIENT, task, round,
//! client)`. Streams never share state, so resuming a run midway needs no
//! saved generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SCHEDULE: u64 = 1;
pub const PARTITION: u64 = 2;
pub const SELECT: u64 = 3;
pub const CLIENT: u64 = 4;
pub const GENERATOR: u64 = 5;
pub const INIT: u64 = 6;
pub const HEAD: u64 = 7;
pub const DROPOUT: u64 = 8;
pub const SEED_INDEX: u64 = 9;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
