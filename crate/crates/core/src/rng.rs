//! Deterministic seed derivation.
//!
//! Every random stream in the workspace (init, dropout, batch shuffles,
//! feature noise) is a ChaCha8 stream keyed by a seed derived from the
//! run seed plus a stable tag, so adding or reordering consumers never
//! perturbs unrelated streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; bijective on u64.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, used to fold string tags into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Child seed for a named stream.
pub fn child_seed(base: u64, tag: &str) -> u64 {
    mix(base ^ fnv1a(tag.as_bytes()))
}

/// Child seed for the n-th item of a named stream.
pub fn child_seed_n(base: u64, tag: &str, n: u64) -> u64 {
    mix(child_seed(base, tag) ^ mix(n))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
