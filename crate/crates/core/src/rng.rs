//! Keyed seed derivation. Every random stream in the crate is a ChaCha8
//! generator seeded from a master seed mixed with a tuple of keys, so a draw
//! depends only on its key and never on how many draws came before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `keys` into `seed`.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn keyed_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

/// Stream labels, so independent pipeline stages never share a generator.
pub mod stream {
    pub const MODEL_INIT: u64 = 1;
    pub const PRETRAIN_SHUFFLE: u64 = 2;
    pub const PRETRAIN_AUGMENT: u64 = 3;
    pub const LINEAR_EVAL: u64 = 4;
    pub const TRAIN_SHUFFLE: u64 = 5;
    pub const TRAIN_AUGMENT: u64 = 6;
    pub const AUX_ONLY: u64 = 7;
    pub const GEOMETRY: u64 = 8;
    pub const LABELED_SAMPLES: u64 = 9;
    pub const UNLABELED_SAMPLES: u64 = 10;
    pub const TEST_SAMPLES: u64 = 11;
    pub const CLASSIFIER_INIT: u64 = 12;
}
