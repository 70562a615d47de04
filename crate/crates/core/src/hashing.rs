//! Content hashing and seed derivation.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// JSON with object keys sorted, no insignificant whitespace.
///
/// `serde_json::Value` keeps objects in a `BTreeMap`, so a round-trip through it
/// sorts keys at every level.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical JSON encoding, hex encoded.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

/// Derives an independent 64-bit seed from a global seed and a list of labels.
pub fn derive_seed(global_seed: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn seed_from_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}
