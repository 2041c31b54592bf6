//! Seed derivation for reproducible per-sample randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one sample in one epoch, independent of processing order.
pub fn derive_seed(global_seed: u64, sample_id: &str, epoch: u64) -> u64 {
    let h = fnv1a(sample_id.as_bytes());
    splitmix(splitmix(global_seed ^ h).wrapping_add(epoch))
}

/// Seed for a named stream (shuffling, initialization) of a run.
pub fn stream_seed(global_seed: u64, stream: &str) -> u64 {
    derive_seed(global_seed, stream, u64::MAX)
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
