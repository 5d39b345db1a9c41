//! Experiment configuration: TOML file, dotted-path overrides, and the
//! canonical digest embedded in every output file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unient_core::adapt::AdaptConfig;
use unient_core::bench::BenchmarkConfig;
use unient_core::metrics::ScoreKind;
use unient_core::nn::PretrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkConfig,
    pub adapt: AdaptConfig,
    pub pretrain: PretrainConfig,
    pub checkpoint_path: PathBuf,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub score_kind: ScoreKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkConfig::default(),
            adapt: AdaptConfig::default(),
            pretrain: PretrainConfig::default(),
            checkpoint_path: PathBuf::from("out/checkpoint.json"),
            output_dir: PathBuf::from("out"),
            seeds: vec![42, 43, 44, 45, 46],
            score_kind: ScoreKind::Energy,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds must be nonempty".into()));
        }
        self.benchmark
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.adapt
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    /// Apply `--set dotted.path=value` overrides on the JSON representation
    /// and re-deserialize. Values parse as JSON when possible, else as
    /// strings.
    pub fn apply_overrides(self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut value = serde_json::to_value(&self).expect("config serializes");
        for item in overrides {
            let (path, raw) = item.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("override `{item}` is not of the form key=value"))
            })?;
            let new: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let segments: Vec<&str> = path.split('.').collect();
            let (leaf, parents) = segments.split_last().expect("split_once gave a path");
            let pointer: String = parents.iter().map(|s| format!("/{s}")).collect();
            let parent = value
                .pointer_mut(&pointer)
                .ok_or_else(|| CliError::Usage(format!("unknown config section in `{path}`")))?;
            let map = parent.as_object_mut().ok_or_else(|| {
                CliError::Usage(format!("override path `{path}` does not address a field"))
            })?;
            if !map.contains_key(*leaf) {
                return Err(CliError::Usage(format!(
                    "unknown config field `{leaf}` in `{path}`"
                )));
            }
            map.insert((*leaf).to_string(), new);
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("override produced invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// FNV-1a 64 over the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
