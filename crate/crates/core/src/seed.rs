//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng` seeded
//! from a base seed mixed with a stream tag, so runs replay exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and an index into an independent seed.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag.rotate_left(17)) ^ index.rotate_left(41))
}

pub fn rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

pub(crate) mod tags {
    pub const DATASET: u64 = 0x6461_7461;
    pub const TREE: u64 = 0x7472_6565;
    pub const PAIRS: u64 = 0x7061_6972;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const INIT: u64 = 0x696e_6974;
    pub const SBS: u64 = 0x7362_7373;
    pub const QUESTION: u64 = 0x7175_6573;
}
