//! Deterministic random streams.
//!
//! Every stochastic operation takes an explicit `u64` seed and draws from
//! [`ChaCha8Rng`] seeded through `SeedableRng::seed_from_u64`. ChaCha8 output
//! is fixed by its algorithm, so a given seed yields the same stream on every
//! platform and thread count.
//!
//! Component seeds are derived from one master seed as
//! `splitmix64(master ^ fnv1a64(component_name))`, and indexed sub-streams
//! (one per tree, for instance) as `splitmix64(seed ^ splitmix64(index + 1))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Seed for a named component, derived from the master seed.
pub fn derive_seed(master: u64, component: &str) -> u64 {
    splitmix64(master ^ fnv1a64(component.as_bytes()))
}

/// Seed for the `index`-th independent stream under `seed`.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}
