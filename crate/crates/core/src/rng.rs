//! Deterministic, counter-keyed random streams.
//!
//! Every stochastic component (seeding, exploration noise, dropout, replay
//! sampling, weight init) draws from a stream keyed by the run seed plus a
//! tuple of counters, so results do not depend on call order across streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains, so two components keyed with the same counters never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Seeds = 1,
    Phantom = 2,
    Init = 3,
    Explore = 4,
    Replay = 5,
    Dropout = 6,
    Select = 7,
    Segments = 8,
    Split = 9,
    Shuffle = 10,
    Misc = 11,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `(seed, domain, keys...)` into a single 64-bit value.
pub fn mix(seed: u64, domain: Domain, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(domain as u64));
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// A ChaCha stream keyed by `(seed, domain, keys...)`.
pub fn keyed(seed: u64, domain: Domain, keys: &[u64]) -> Rng {
    let mut bytes = [0u8; 32];
    let mut h = mix(seed, domain, keys);
    for chunk in bytes.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Uniform value in `[0, 1)` from the hash of `(seed, domain, keys...)`.
pub fn unit(seed: u64, domain: Domain, keys: &[u64]) -> f64 {
    (mix(seed, domain, keys) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
