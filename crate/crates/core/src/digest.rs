//! Stable content hashes for configs, tensors and reports.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the JSON serialization; struct field order makes this stable.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes to JSON"))
}

/// Hash of shape and little-endian payload.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
