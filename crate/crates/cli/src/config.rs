//! Run configuration: one canonical JSON file per run, overridable by flags.

use std::path::{Path, PathBuf};

use msd_core::bench::BenchGrid;
use msd_core::config::{ModelConfig, Variant};
use msd_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    /// Embedding cache data file; the index sits next to it.
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub seq_len: usize,
    pub embed_dim: Option<usize>,
    pub dropout: Option<f64>,
    /// Full configuration, used when `variant` is `Custom`.
    pub custom: Option<ModelConfig>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Variant::B,
            seq_len: 64,
            embed_dim: None,
            dropout: None,
            custom: None,
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> CliResult<ModelConfig> {
        let mut cfg = match (self.variant, &self.custom) {
            (Variant::Custom, Some(c)) => c.clone(),
            (Variant::Custom, None) => {
                return Err(CliError::Input(
                    "variant custom needs a `model.custom` configuration".into(),
                ))
            }
            (v, _) => ModelConfig::variant(v, self.seq_len)?,
        };
        cfg.embed_dim = self.embed_dim.unwrap_or(cfg.embed_dim);
        cfg.dropout = self.dropout.unwrap_or(cfg.dropout);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub paths: Paths,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Train / validation / test fractions.
    pub split: (f64, f64, f64),
    /// Training runs with consecutive seeds, summarized as mean ± std.
    pub runs: usize,
    pub bench: BenchGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            paths: Paths::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            split: (0.7, 0.2, 0.1),
            runs: 1,
            bench: BenchGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Canonical form: struct field order, two-space indentation.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| CliError::Input("no output directory; pass --out".into()))
    }
}
