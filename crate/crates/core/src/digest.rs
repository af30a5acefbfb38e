//! Stable hashing helpers: content digests, config digests and derived seeds.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of a serializable value through its JSON form.
///
/// Structs serialize in field order and the config types use ordered maps,
/// so equal values always hash equally.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config values serialize");
    sha256_hex(json)[..16].to_string()
}

/// Derive a 64-bit seed from a base seed and a sequence of labels.
///
/// Every label is length-prefixed so `("ab", "c")` and `("a", "bc")` differ.
pub fn derive_seed(base: u64, labels: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Map 64 random bits to a uniform float in `[0, 1)`.
pub fn unit_float(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}
