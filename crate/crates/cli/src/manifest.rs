use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

/// Written beside every command's outputs: enough to rerun it bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Fully resolved configuration of the command.
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, argv: &[String], seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            tool: "synct".into(),
            version: crate::VERSION.into(),
            command: command.into(),
            argv: argv.to_vec(),
            seed,
            config,
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
