//! Run manifests: what ran, with which resolved settings, reading and
//! writing what.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Where a resolved setting came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Flag,
    Config,
    Default,
    Checkpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Every setting the run used, as it would appear in a config file.
    pub config: BTreeMap<String, String>,
    pub resolution: BTreeMap<String, Source>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub format_versions: BTreeMap<String, u32>,
    pub started_unix_secs: f64,
    pub finished_unix_secs: f64,
    /// Command-specific results, such as corpus checksums.
    pub results: BTreeMap<String, String>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        let mut format_versions = BTreeMap::new();
        format_versions.insert("checkpoint".into(), smd::smd_model::CHECKPOINT_FORMAT_VERSION);
        format_versions.insert("manifest".into(), 1);
        Self {
            command: command.into(),
            seed,
            config: BTreeMap::new(),
            resolution: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            format_versions,
            started_unix_secs: now(),
            finished_unix_secs: 0.0,
            results: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString, source: Source) {
        self.config.insert(key.into(), value.to_string());
        self.resolution.insert(key.into(), source);
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.display().to_string());
    }

    pub fn result(&mut self, name: &str, value: impl ToString) {
        self.results.insert(name.into(), value.to_string());
    }

    /// Stamps the end time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_unix_secs = now();
        let json = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Internal(format!("manifest serialization: {e}")))?;
        smd::data_synth::write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(())
    }
}
