//! Run manifest: config snapshot, seed, version, and input checksums,
//! written before any run output so reruns are attributable and comparable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqflow_core::training::MetricsRecord;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Full key=value config snapshot.
    pub config: String,
    /// Input file path -> sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("checksum of {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: String) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), file_checksum(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// One metrics line as written to metrics.jsonl.
#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: usize,
    pub loss: f64,
    pub mean_log_reward: f64,
    pub reward_temp: f64,
    pub buffer_size: usize,
    pub rejected: usize,
    pub wall_ms: u64,
}

impl From<&MetricsRecord<f64>> for MetricsLine {
    fn from(r: &MetricsRecord<f64>) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            mean_log_reward: r.mean_log_reward,
            reward_temp: r.reward_temp,
            buffer_size: r.buffer_size,
            rejected: r.rejected,
            wall_ms: r.wall_ms,
        }
    }
}

/// Serializes the metrics stream as line-delimited JSON.
pub fn metrics_jsonl(metrics: &[MetricsRecord<f64>]) -> String {
    let mut out = String::new();
    for record in metrics {
        let line = MetricsLine::from(record);
        out.push_str(&serde_json::to_string(&line).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// Digest over the deterministic metric fields (everything except wall_ms).
pub fn determinism_digest(metrics: &[MetricsRecord<f64>]) -> String {
    let mut canonical = String::new();
    for r in metrics {
        canonical.push_str(&format!(
            "{} {:?} {:?} {:?} {} {}\n",
            r.step, r.loss, r.mean_log_reward, r.reward_temp, r.buffer_size, r.rejected
        ));
    }
    sha256_hex(canonical.as_bytes())
}
