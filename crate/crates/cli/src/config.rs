//! Run configuration and content hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spectromind::dataset::SplitRatios;
use spectromind::distill::KdConfig;
use spectromind::nn::TrainConfig;
use spectromind::pipeline::SynthSpec;
use spectromind::tfd::TfdKind;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory (manifest.json, labels.jsonl, trials/).
    pub dataset: Option<PathBuf>,
    pub representation: TfdKind,
    /// CNN widths; `None` selects the reference layout with its parameter
    /// budget enforced.
    pub widths: Option<Vec<usize>>,
    pub dropout_rate: f64,
    pub train: TrainConfig,
    pub kd: KdConfig,
    /// Teacher soft targets (`.jsonl`) or image embeddings (`EMBD` file) to
    /// fit a teacher on. Defaults to `teacher.jsonl` beside the dataset.
    pub teacher: Option<PathBuf>,
    pub seed: u64,
    pub split: SplitRatios,
    /// L2 penalty of the logistic-regression baselines.
    pub baseline_l2: f64,
    pub window: usize,
    pub pca_variance: f64,
    pub synth: SynthSpec,
    pub endpoint: String,
    pub steps: u32,
    pub in_flight: usize,
    pub rt_factor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            representation: TfdKind::Stft,
            widths: None,
            dropout_rate: 0.3,
            train: TrainConfig::default(),
            kd: KdConfig::default(),
            teacher: None,
            seed: 0,
            split: SplitRatios::default(),
            baseline_l2: 1e-3,
            window: 80,
            pca_variance: 0.95,
            synth: SynthSpec::default(),
            endpoint: "http://127.0.0.1:7860".into(),
            steps: 30,
            in_flight: 2,
            rt_factor: 0.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        self.kd.validate()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CliError::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.rt_factor >= 0.0) {
            return Err(CliError::Config("rt factor must be non-negative".into()));
        }
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(CliError::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.teacher {
            if !p.exists() {
                return Err(CliError::Config(format!("teacher {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON of `value` (object keys sorted).
pub fn hash_json<T: Serialize>(value: &T) -> String {
    // serde_json::Value keeps object keys in sorted order
    let canonical = serde_json::to_value(value).expect("serializable");
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
