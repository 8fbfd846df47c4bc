//! Deterministic RNG stream derivation.
//!
//! Every source of randomness in a run is a ChaCha stream derived from the
//! single master seed, a purpose tag, and zero or more indices (round,
//! client id, ensemble pass, ...). Streams are independent of execution
//! order and thread count, which is what makes whole runs reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good avalanche for cheap seed mixing.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapse (master seed, tag, indices) into a single 64-bit stream seed.
pub fn stream_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = mix(master);
    for &b in tag.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    for &i in indices {
        h = mix(h ^ i);
    }
    h
}

/// A fresh RNG for the given (master seed, tag, indices) stream.
pub fn stream(master: u64, tag: &str, indices: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stream_seed(master, tag, indices))
}
