//! Run manifests: enough to reproduce a run and to find its artifacts.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mlrl_core::config;
use mlrl_core::trainer::TrainerConfig;
use mlrl_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const REWARD_FILE: &str = "reward.ckpt";
pub const DATASET_FILE: &str = "dataset.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Complete configuration in `key = value` form.
    pub config: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub started_at: u64,
    pub finished_at: u64,
    /// Artifact paths relative to `out_dir`.
    pub artifacts: Vec<String>,
    /// Git-style blob hash of `config`.
    pub input_hash: String,
}

/// `sha256("blob <len>\0" + content)`, as git hashes file contents.
pub fn blob_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(cfg: &TrainerConfig, seeds: &[u64], out_dir: &Path) -> Self {
        let text = config::to_text(cfg);
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            input_hash: blob_hash(&text),
            config: text,
            seed: cfg.seed,
            seeds: seeds.to_vec(),
            out_dir: out_dir.to_path_buf(),
            started_at: unix_now(),
            finished_at: 0,
            artifacts: Vec::new(),
        }
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig> {
        if blob_hash(&self.config) != self.input_hash {
            return Err(Error::config("manifest config does not match its input hash"));
        }
        config::parse(&self.config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(std::fs::write(path, text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}
