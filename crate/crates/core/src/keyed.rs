//! Stable keyed randomness and digests.
//!
//! Everything the simulator draws is a pure function of a key built from the
//! world seed and structural indices, so regenerating a world or replaying a
//! single row never depends on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Domain-separated 64-bit key derived from a tag and integer parts.
pub fn derive_key(tag: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

/// 64-bit key of an arbitrary string (entry ids, payloads).
pub fn text_key(text: &str) -> u64 {
    derive_key(text, &[])
}

/// Uniform in [0, 1) determined by the key.
pub fn keyed_uniform(tag: &str, parts: &[u64]) -> f64 {
    // 53 high bits -> exact dyadic in [0, 1)
    (derive_key(tag, parts) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn keyed_rng(tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(tag, parts))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
