//! Seed derivation shared by every randomized operation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit hash of a string (first eight bytes of SHA-256).
pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Per-item sub-seed: `seed ^ hash(key)`.
pub fn derive(seed: u64, key: &str) -> u64 {
    seed ^ hash_str(key)
}

pub fn derived_rng(seed: u64, key: &str) -> Rng {
    rng(derive(seed, key))
}

/// Hex SHA-256 of arbitrary bytes, used for content addressing.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
