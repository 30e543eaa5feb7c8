//! Seeded random streams.
//!
//! Every consumer of randomness derives its generator from an experiment
//! seed and a stream name, so any stage can be re-run in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for `(seed, stream)`; distinct names give independent streams.
pub fn substream(seed: u64, stream: &str) -> Rng {
    Rng::seed_from_u64(mix(seed, fnv1a(stream.as_bytes())))
}

/// Generator for `(seed, stream, index)`, e.g. one per scan.
pub fn indexed(seed: u64, stream: &str, index: u64) -> Rng {
    Rng::seed_from_u64(mix(mix(seed, fnv1a(stream.as_bytes())), index))
}

/// Child seed for `(seed, stream)`, for APIs that take a plain seed.
pub fn substream_seed(seed: u64, stream: &str) -> u64 {
    mix(seed, fnv1a(stream.as_bytes()))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

// splitmix64 finalizer
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
