//! Seeded random streams.

use rand::SeedableRng;

/// The generator used everywhere a stream must be reproducible.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pure seed derivation: the same `(parent, index)` always yields the same child.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Derivation with a string tag, for independent streams of one run.
pub fn derive_tagged(parent: u64, tag: &str) -> u64 {
    tag.bytes()
        .fold(splitmix64(parent ^ 0x5EED), |acc, b| splitmix64(acc ^ b as u64))
}
