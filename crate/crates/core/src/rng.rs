//! Keyed random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose
//! 256-bit key is the little-endian concatenation
//! `seed ‖ domain ‖ a ‖ b` of four `u64` words. ChaCha is a counter-based
//! generator, so a given key always yields the same sequence on every
//! platform, and streams for different `(domain, a, b)` are independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates the uses of one user seed so that, e.g., initialization and
/// dropout never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Dropout = 2,
    BatchSample = 3,
    SynthWorld = 4,
    SynthVideo = 5,
    Baseline = 6,
}

pub fn keyed(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
