//! Counter-based derivation of independent random streams.
//!
//! Every consumer of randomness gets its own generator keyed by
//! `(seed, domain, index)`, so results never depend on call order across
//! subsystems and a run can resume from any step without saved generator
//! state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    LabelMeans = 2,
    Utterance = 3,
    DevUtterance = 4,
    Batching = 5,
    Dropout = 6,
    Augment = 7,
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// 64-bit FNV-1a, used to key parameter initialisation by name.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
