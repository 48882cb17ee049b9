use sha2::{Digest, Sha256};

/// SHA-256 (hex) of the compact JSON encoding of `value`.
///
/// Object keys serialize in sorted order, so equal documents hash equally.
pub fn json_digest(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("JSON values always serialize");
    hex::encode(Sha256::digest(&bytes))
}
