//! Seed fan-out.
//!
//! One top-level seed deterministically derives per-stage and per-item
//! streams: the derived seed is the first 8 bytes (little-endian) of
//! SHA-256(base_seed LE bytes || label). Stages stay independent and
//! individually reproducible.

use sha2::{Digest, Sha256};

pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let out = hasher.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&out[..8]);
    u64::from_le_bytes(first)
}
