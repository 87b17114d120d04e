//! Tool version, configuration hash and seed stamped into every artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = concat!("hrrsteer ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Provenance { tool_version: TOOL_VERSION.to_string(), config_hash: config_hash.into(), seed }
    }

    /// Provenance for a value whose canonical JSON form is its configuration.
    pub fn of<T: Serialize>(config: &T, seed: u64) -> Self {
        Self::new(config_hash(config), seed)
    }
}

/// Hex SHA-256 of the canonical JSON serialization (struct field order).
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configuration serializes");
    hex(&Sha256::digest(&bytes))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        // FIPS 180-2 test vector.
        assert_eq!(
            hex(&Sha256::digest(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_tracks_content() {
        assert_eq!(config_hash(&(1, "a")), config_hash(&(1, "a")));
        assert_ne!(config_hash(&(1, "a")), config_hash(&(2, "a")));
    }
}
