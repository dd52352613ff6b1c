//! Deterministic RNG streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Independent stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    let k = splitmix64(
        seed ^ splitmix64(fnv1a32(tag.as_bytes()) as u64)
            ^ splitmix64(index.wrapping_add(0x5851_f42d)),
    );
    ChaCha8Rng::seed_from_u64(k)
}
