//! Deterministic seeding.
//!
//! A single user-facing seed expands into independent per-task streams:
//! the stream for `(seed, label)` is keyed by a hash of both, so tasks that
//! run in parallel draw the same numbers regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::io::fnv1a64;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the stream identified by `(seed, label)`.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    splitmix64(fnv1a64(&bytes))
}

pub fn stream(seed: u64, label: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label))
}

/// Indexed child of a labelled stream, for per-item work (rows, trials, runs).
pub fn substream(seed: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(splitmix64(stream_seed(seed, label) ^ splitmix64(index)))
}
