//! Keyed random streams.
//!
//! Every consumer of randomness derives its own generator from the run seed
//! plus a key path (for example `[MASK, step, example, layer, head]`), so
//! results do not depend on the order in which work is executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SHUFFLE: u64 = 1;
pub const DROPOUT: u64 = 2;
pub const MASK: u64 = 3;
pub const RANDOM_ATTRIBUTION: u64 = 4;
pub const INIT: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    key.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}
