//! Deterministic seed derivation. Every random stream in the pipeline is a
//! ChaCha8 generator seeded from a hash of the values that identify it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, finished with a splitmix round.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(h)
}

/// Folds a list of stream identifiers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stream tags, so that different consumers of the same seed never collide.
pub(crate) mod tag {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const GMM: u64 = 5;
    pub const DIMS: u64 = 6;
    pub const SYNTH: u64 = 7;
}
