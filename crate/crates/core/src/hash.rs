//! FNV-1a hashing and named random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// SplitMix64 finalizer. FNV-1a barely moves the high bits for ids that
/// differ only in their last few bytes, so sort keys go through this.
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent generator for the sub-stream `name` of a master seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.push(b'/');
    bytes.extend_from_slice(name.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}
