//! Run manifest: what was trained, where the artifacts are, how long things
//! took. Updated atomically at every stage boundary. Timings live only here,
//! never in metric tables, so reruns stay byte-comparable at the report level.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::paths::atomic_write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Checkpoint path relative to the run dir.
    pub checkpoint: String,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub root_seed: u64,
    /// One record per completed training stage.
    pub stages: BTreeMap<String, StageRecord>,
    /// Metric tables and other outputs, name → path relative to the run dir.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock per command, latest invocation wins.
    pub timings_ms: BTreeMap<String, u128>,
}

impl RunManifest {
    pub fn load_or_default(path: &Path) -> Result<RunManifest> {
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::config(format!("corrupt manifest {}: {e}", path.display())))
    }

    /// Stamp the identity fields and write atomically.
    pub fn save(&mut self, path: &Path, config_hash: &str, root_seed: u64) -> Result<()> {
        self.config_hash = config_hash.to_string();
        self.code_version = env!("CARGO_PKG_VERSION").to_string();
        self.root_seed = root_seed;
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::config(format!("serialize manifest: {e}")))?;
        text.push('\n');
        atomic_write(path, text.as_bytes())
    }
}
