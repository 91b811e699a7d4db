//! Canonical JSON and digests.
//!
//! Canonical form is compact JSON with object keys in sorted order. Every
//! digest in the crate is SHA-256 over that form, rendered as lowercase hex.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const HASH_ALGORITHM: &str = "sha256";

/// Serializes through `serde_json::Value`, whose maps are ordered by key.
pub fn to_canonical<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    canonical_json(&v)
}

pub fn canonical_json(value: &Value) -> String {
    serde_json::to_string(value).expect("JSON value serializes")
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_value(value: &Value) -> String {
    digest_bytes(canonical_json(value).as_bytes())
}

pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> String {
    digest_bytes(to_canonical(value).as_bytes())
}

/// Shallow merge of `patch` into `target`, key by key.
pub(crate) fn merge_into(target: &mut serde_json::Map<String, Value>, patch: &Value) {
    if let Value::Object(p) = patch {
        for (k, v) in p {
            target.insert(k.clone(), v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_compact() {
        let v: Value = serde_json::from_str(r#"{ "b": 1, "a": {"d": [1, 2], "c": null} }"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":{"c":null,"d":[1,2]},"b":1}"#);
    }

    #[test]
    fn digest_matches_reference_vector() {
        // sha256("abc")
        assert_eq!(
            digest_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(digest_value(&json!({"x": 1, "y": 2})), digest_value(&json!({"y": 2, "x": 1})));
    }
}
