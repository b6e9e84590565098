//! Deterministic RNG stream derivation.
//!
//! Every source of randomness in a run is a ChaCha stream derived from the
//! master seed, a purpose label, and an index. Streams are independent of
//! evaluation order, which keeps runs reproducible and lets planner
//! candidates be scored in any order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Seed derived from `(master, purpose, index)`.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let h = fnv1a(purpose.as_bytes(), master);
    fnv1a(&index.to_le_bytes(), h)
}

pub fn stream(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, index))
}

/// Seed keyed by arbitrary content, e.g. a candidate action sequence.
pub fn content_seed(base: u64, bytes: &[u8]) -> u64 {
    fnv1a(bytes, base)
}

pub fn content_stream(base: u64, bytes: &[u8]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(content_seed(base, bytes))
}
