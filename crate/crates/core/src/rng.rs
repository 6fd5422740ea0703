//! Counter-based seed derivation so independent streams can be drawn in any
//! order with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of counters into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| {
        splitmix(acc ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)))
    })
}

pub fn rng_for(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}
