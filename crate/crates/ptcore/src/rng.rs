//! Deterministic stream derivation.
//!
//! Every random draw in the library comes from a ChaCha stream seeded by
//! hashing (experiment seed, purpose tag, indices). Worker count and
//! scheduling therefore never change results: a block always sees the same
//! stream no matter where it runs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable tags for the independent random streams of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    NoiseState = 1,
    Calibrate = 2,
    Map = 3,
    Train = 4,
    Dataset = 5,
    Mask = 6,
    Init = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a stream tag and arbitrary indices into a new seed.
pub fn derive_seed(base: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ (stream as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    for &ix in indices {
        h = splitmix64(h ^ ix.wrapping_mul(0xe703_7ed1_a0b4_28db));
    }
    h
}

/// Deterministic RNG for one (seed, stream, indices) coordinate.
pub fn stream_rng(base: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, indices))
}
