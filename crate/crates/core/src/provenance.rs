//! Config hashing and the provenance record written next to every artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PROVENANCE_FILE: &str = "provenance.json";

/// SHA-256 of the config's JSON serialization (struct field order, so equal
/// configs hash equally).
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configs serialize to JSON");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            seed,
            version: version_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(PROVENANCE_FILE);
        let json = serde_json::to_string_pretty(self).expect("provenance serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// `vidistill-core <version>`, plus the git revision when the build
/// environment provides one.
pub fn version_string() -> String {
    match option_env!("VIDISTILL_GIT_REV") {
        Some(rev) => format!("vidistill-core {}+{rev}", env!("CARGO_PKG_VERSION")),
        None => format!("vidistill-core {}", env!("CARGO_PKG_VERSION")),
    }
}
