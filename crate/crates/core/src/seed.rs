//! Seed derivation. Every random stream in a run is a pure function of the
//! run seed and a small path of integer tags, so runs replay exactly no
//! matter how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, one splitmix round per tag.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream tags shared between modules.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_SHUFFLE: u64 = 2;
pub(crate) const TAG_DROPOUT_STUDENT: u64 = 3;
pub(crate) const TAG_DROPOUT_TEACHER: u64 = 4;
pub(crate) const TAG_SPLIT: u64 = 5;
pub(crate) const TAG_DROP_LABELS: u64 = 6;
pub(crate) const TAG_LE_STUDENT: u64 = 7;
