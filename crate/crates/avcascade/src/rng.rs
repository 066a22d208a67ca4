//! Seed derivation. Every random draw in the crate flows from a ChaCha8
//! generator keyed by a user seed mixed with a purpose tag, so independent
//! stages never share a stream and reruns are bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; stable across platforms and releases.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fold a seed with a list of context values into one 64-bit key.
pub fn derive_key(seed: u64, parts: &[u64]) -> u64 {
    let mut h = mix(seed);
    for &p in parts {
        h = mix(h ^ p);
    }
    h
}

/// Stable string hash (not DefaultHasher, whose algorithm is unspecified).
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for chunk in s.as_bytes().chunks(8) {
        let mut w = [0u8; 8];
        w[..chunk.len()].copy_from_slice(chunk);
        h = mix(h ^ u64::from_le_bytes(w));
    }
    h
}

/// Generator for one (seed, purpose, indices...) context.
pub fn stream(seed: u64, purpose: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut key = derive_key(seed, &[hash_str(purpose)]);
    key = derive_key(key, parts);
    ChaCha8Rng::seed_from_u64(key)
}
