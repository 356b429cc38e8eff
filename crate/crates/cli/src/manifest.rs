use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TOOL: &str = "relikin";

/// Record of one command invocation. `config` holds the fully resolved
/// settings, enough to run the command again without any other input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
