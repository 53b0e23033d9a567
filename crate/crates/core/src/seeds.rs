//! Hierarchical seed derivation. Every random stream in a campaign is keyed
//! off the campaign seed, a stream label and a tuple of indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `base`, a stream label and indices.
pub fn derive(base: u64, stream: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn rng(base: u64, stream: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, stream, indices))
}
