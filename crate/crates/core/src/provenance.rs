//! Run identity stamped into every output file.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ndcore::Precision;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub precision: Precision,
    pub code_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64, precision: Precision) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            precision,
            code_version: CODE_VERSION.to_string(),
        }
    }

    pub const CSV_COLUMNS: [&'static str; 4] = ["config_hash", "seed", "precision", "code_version"];

    pub fn csv_fields(&self) -> [String; 4] {
        [
            self.config_hash.clone(),
            self.seed.to_string(),
            self.precision.name().to_string(),
            self.code_version.clone(),
        ]
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
