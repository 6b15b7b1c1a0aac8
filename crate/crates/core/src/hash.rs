use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON encoding of `value`.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    digest_hex(&serde_json::to_vec(value).expect("value serializes to JSON"))
}
