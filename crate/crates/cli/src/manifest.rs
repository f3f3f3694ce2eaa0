//! Run manifests. The JSON schema lives in `schema/manifest.schema.json`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::output::sha256_hex;

pub const SCHEMA_ID: &str = "crossdiff-run-manifest/1";
pub const SCHEMA: &str = include_str!("../schema/manifest.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    /// sha256 of the config file bytes.
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub summary: serde_json::Value,
    /// Acceptance checks evaluated by the command (empty when none apply).
    pub acceptance: BTreeMap<String, bool>,
    /// Files written by the command, relative to the output directory.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_bytes: &[u8], seed: u64) -> Self {
        Self {
            schema: SCHEMA_ID.into(),
            command: command.into(),
            config_hash: sha256_hex(config_bytes),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            wall_clock_seconds: 0.0,
            summary: serde_json::Value::Null,
            acceptance: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.acceptance.values().all(|v| *v)
    }

    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }
}
