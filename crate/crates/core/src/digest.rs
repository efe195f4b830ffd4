use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in out.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Digest of a value's compact JSON serialization. Struct field order is
/// declaration order and maps are expected to be `BTreeMap`, so the bytes
/// are stable.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

/// First 64 bits of the SHA-256 of `bytes`, for seeding.
pub fn seed_from(bytes: &[u8]) -> u64 {
    let out = Sha256::digest(bytes);
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}
