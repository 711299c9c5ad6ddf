//! Named, reproducible seed sub-streams.
//!
//! All randomness in a run flows from a single base seed. Sub-streams are
//! derived by hashing the base seed with a stream name (and optional index),
//! so parallel and serial executions draw identical values.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer, used to decorrelate derived seeds.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a stream `name`.
pub fn derive(base: u64, name: &str) -> u64 {
    splitmix(base ^ fnv1a(name.as_bytes()))
}

/// Derive a child seed from `base`, a stream `name`, and an index
/// (per-sample, per-epoch, ...).
pub fn derive_indexed(base: u64, name: &str, index: u64) -> u64 {
    splitmix(derive(base, name) ^ splitmix(index))
}

/// Seeded RNG for a named sub-stream.
pub fn rng(base: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, name))
}

/// Seeded RNG for a named, indexed sub-stream.
pub fn rng_indexed(base: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(base, name, index))
}
