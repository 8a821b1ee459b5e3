//! Run directory layout and stage records.
//!
//! Every stage writes `stages/<name>.json` holding a content hash of its
//! inputs. A stage whose record already carries the same hash, and whose
//! outputs still exist, is skipped.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::hash_json;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Digest of upstream hashes plus this stage's configuration subset.
    pub hash: String,
    pub dataset_digest: String,
    /// Hash of the full run configuration that produced the stage.
    pub config_hash: String,
    pub seed: u64,
    /// Stage-specific output description.
    pub outputs: serde_json::Value,
}

pub struct RunDir {
    pub root: PathBuf,
    pub cache: PathBuf,
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        let cache = std::env::var_os("SPECTROMIND_CACHE")
            .map(PathBuf::from)
            .unwrap_or_else(|| root.join("cache"));
        Self { root, cache }
    }

    pub fn stage_path(&self, name: &str) -> PathBuf {
        self.root.join("stages").join(format!("{name}.json"))
    }

    pub fn model_dir(&self, method: &str) -> PathBuf {
        self.root.join("models").join(method)
    }

    pub fn report_path(&self, method: &str) -> PathBuf {
        self.root.join("reports").join(format!("{method}.json"))
    }

    pub fn predictions_path(&self, method: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{method}.json"))
    }

    /// Loads a stage record; a missing one is a dependency error naming the
    /// command that produces it.
    pub fn require(&self, name: &str, producer: &'static str) -> CliResult<StageRecord> {
        let path = self.stage_path(name);
        if !path.exists() {
            return Err(CliError::missing(&path, producer));
        }
        read_json(&path)
    }

    /// The existing record when it matches `hash` and `outputs_exist` holds.
    pub fn up_to_date(&self, name: &str, hash: &str, outputs_exist: impl Fn(&StageRecord) -> bool) -> Option<StageRecord> {
        let rec: StageRecord = read_json(&self.stage_path(name)).ok()?;
        (rec.hash == hash && outputs_exist(&rec)).then_some(rec)
    }

    pub fn record(&self, rec: &StageRecord) -> CliResult<()> {
        write_json(&self.stage_path(&rec.stage), rec)
    }
}

pub fn stage_hash<T: Serialize>(stage: &str, upstream: &str, params: &T) -> String {
    hash_json(&serde_json::json!({ "stage": stage, "upstream": upstream, "params": params }))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| spectromind::Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| spectromind::Error::Format(format!("{}: {e}", path.display())).into())
}

/// Writes pretty JSON through a temporary file so readers never see a
/// partial artifact.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(spectromind::Error::from)?;
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| spectromind::Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| spectromind::Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| spectromind::Error::io(path, e))?;
    Ok(())
}
