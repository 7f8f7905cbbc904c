// SPDX-License-Identifier: Apache-2.0

//! Stable configuration digests.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 (hex) of the canonical JSON form of `value`.
///
/// Object keys are sorted, so the digest does not depend on the key order of
/// the file the configuration was read from.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    // serde_json::Value keeps objects in a BTreeMap, so this sorts keys.
    let canonical = serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("configuration serializes to JSON");
    let out = Sha256::digest(canonical.as_bytes());
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// First eight bytes of [`config_digest`] as a little-endian integer.
pub fn short_digest(hex: &str) -> u64 {
    let bytes: Vec<u8> = (0..16)
        .step_by(2)
        .filter_map(|i| hex.get(i..i + 2))
        .filter_map(|pair| u8::from_str_radix(pair, 16).ok())
        .collect();
    let mut word = [0u8; 8];
    word[..bytes.len()].copy_from_slice(&bytes);
    u64::from_le_bytes(word)
}
