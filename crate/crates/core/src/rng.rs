//! Seeded random streams.
//!
//! Every random draw in the simulator comes from a ChaCha8 generator whose
//! seed is derived from the run seed plus a tuple of stream tags (client id,
//! round, purpose, ...). Streams are therefore independent of scheduling
//! order, which keeps parallel client training and resumed runs bit-exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes. Distinct constants keep e.g. crop positions and style
/// draws of the same client/round from sharing a generator.
pub mod purpose {
    pub const INIT: u64 = 0x01;
    pub const CROP: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
    pub const REGISTER: u64 = 0x04;
    pub const GEOMETRY: u64 = 0x05;
    pub const NOISE: u64 = 0x06;
    pub const DOMAIN: u64 = 0x07;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a list of tags into a single 64-bit stream key.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Generator for the stream identified by `seed` and `tags`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
