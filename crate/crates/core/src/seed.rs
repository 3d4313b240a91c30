//! Seed derivation. Every random stream in a run is a pure function of the
//! global seed and a few coordinates, so results do not depend on worker
//! count or on where a run was resumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a list of coordinates into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// Seed for masking one corpus line in one epoch.
pub fn example_seed(global: u64, corpus_id: u64, line: u64, epoch: u64) -> u64 {
    derive(&[global, corpus_id, line, epoch])
}
