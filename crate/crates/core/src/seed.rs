//! Deterministic seed fan-out: every job derives a private RNG from the master
//! seed, a stage tag and its item index, so partial re-runs reproduce exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type JobRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes.
fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// `hash(master, stage tag, item index)`.
pub fn child_seed(master: u64, tag: &str, index: u64) -> u64 {
    let h = splitmix64(master ^ splitmix64(tag_hash(tag)));
    splitmix64(h ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn job_rng(master: u64, tag: &str, index: u64) -> JobRng {
    JobRng::seed_from_u64(child_seed(master, tag, index))
}

pub fn rng_from_seed(seed: u64) -> JobRng {
    JobRng::seed_from_u64(seed)
}
