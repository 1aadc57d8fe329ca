//! Deterministic stream derivation.
//!
//! Every random decision in the crate draws from a `ChaCha8Rng` whose seed is
//! derived from a small tuple of integers (run seed, episode index, stream
//! salt). Streams for distinct tuples are independent, so episodes can be
//! sampled or perturbed in any order, on any number of workers, without
//! changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream salts. Each independent consumer of randomness gets its own salt so
/// adding a new consumer never shifts an existing stream.
pub mod salt {
    pub const EPISODE: u64 = 0x01;
    pub const REMOVE: u64 = 0x02;
    pub const REPLACE: u64 = 0x03;
    pub const HEADS: u64 = 0x04;
    pub const INIT: u64 = 0x05;
    pub const BATCH: u64 = 0x06;
    pub const OOV: u64 = 0x07;
    pub const SYNTH: u64 = 0x08;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG from a tuple of integers.
pub fn derive_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut state: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        state ^= splitmix64(&mut state) ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Stable 64-bit content hash (FNV-1a); used for OOV vectors and checksums.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
