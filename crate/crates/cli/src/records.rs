//! Append-only run records: one JSON line per executed stage.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use pmda_core::error::{Error, Result};
use pmda_core::io::Manifest;

#[derive(Serialize)]
pub struct RunRecord {
    pub stage: String,
    pub manifest_hash: String,
    pub seed: u64,
    pub wall_ms: u128,
    pub artifacts: Vec<PathBuf>,
    pub metrics: serde_json::Value,
}

pub fn manifest_hash(manifest: &Manifest) -> String {
    let text = serde_json::to_string(manifest).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    format!("{:x}", hasher.finalize())
}

/// Append one record to `<out>/run_records.jsonl`. Every artifact path
/// must exist by the time the record is written.
pub fn append_record(
    out: &Path,
    stage: &str,
    manifest: &Manifest,
    started: Instant,
    artifacts: Vec<PathBuf>,
    metrics: serde_json::Value,
) -> Result<()> {
    for a in &artifacts {
        if !a.exists() {
            return Err(Error::ContractViolation(format!(
                "stage `{stage}` recorded a missing artifact: {}",
                a.display()
            )));
        }
    }
    let record = RunRecord {
        stage: stage.to_string(),
        manifest_hash: manifest_hash(manifest),
        seed: manifest.seed,
        wall_ms: started.elapsed().as_millis(),
        artifacts,
        metrics,
    };
    let line = serde_json::to_string(&record)
        .map_err(|e| Error::ContractViolation(format!("record serialization: {e}")))?;
    std::fs::create_dir_all(out)?;
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("run_records.jsonl"))?;
    writeln!(f, "{line}")?;
    Ok(())
}
