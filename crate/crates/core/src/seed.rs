//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by a global seed plus a few coordinates (epoch, clip ordinal,
//! ...), so results do not depend on worker count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a base seed with an ordered list of coordinates.
pub fn mix(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng_for(seed: u64, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(mix(seed, coords))
}
