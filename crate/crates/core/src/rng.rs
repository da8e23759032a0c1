//! Seed derivation for independent random streams.

use sha2::{Digest, Sha256};

/// Child seed of `seed` for the stream named by `parts`. Streams with
/// different `parts` are statistically independent, so adding draws to one
/// never shifts another.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
