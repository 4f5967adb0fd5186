//! Seeding for reproducible chains.
//!
//! Every stochastic routine takes either a caller-owned RNG or a `u64` seed.
//! Per-chain seeds come from a splitmix64 step over `master ^ index`, so the
//! stream a chain sees depends only on the master seed and its index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for chain `index` under `master`.
pub fn chain_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> ChainRng {
    ChaCha8Rng::seed_from_u64(seed)
}
