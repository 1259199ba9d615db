//! Stable seed derivation.
//!
//! Every seed used downstream of a user-supplied base seed is derived by
//! hashing, so results never depend on iteration order or thread scheduling.

use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a base seed and an ordered list of labels.
pub fn derive(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Per-request sampling seed for caption generation: a stable function of
/// the sample id and the sample index.
pub fn sample_seed(sample_id: &str, sample_index: u32) -> u64 {
    derive(0, &[sample_id, &sample_index.to_string()])
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
