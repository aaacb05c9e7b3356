//! Deterministic RNG derivation.
//!
//! Every stochastic choice in the lab is keyed by a root seed plus a purpose
//! string, so independent subsystems (dataset, init, batch order) never share
//! or shift each other's streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a child RNG from a root seed and a purpose label.
///
/// The label and any extra indices are folded with FNV-1a so the mapping is
/// stable across runs and platforms.
pub fn derive_rng(seed: u64, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for b in seed.to_le_bytes() {
        mix(b);
    }
    for b in purpose.as_bytes() {
        mix(*b);
    }
    for idx in indices {
        for b in idx.to_le_bytes() {
            mix(b);
        }
    }
    ChaCha8Rng::seed_from_u64(h)
}
