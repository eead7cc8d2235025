//! Experiment configuration: one JSON document plus `--set` overrides.

use std::path::{Path, PathBuf};

use laser_core::model::ModelConfig;
use laser_core::train::TrainConfig;
use laser_core::AttentionSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            layers: m.layers,
            d_model: m.d_model,
            heads: m.heads,
            mlp_hidden: m.mlp_hidden,
            vocab_size: 256,
            max_seq_len: m.max_seq_len,
            tie_embeddings: m.tie_embeddings,
            init_std: m.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Corpus file, read as raw bytes. Relative paths are resolved against
    /// the directory of the config file.
    pub path: Option<PathBuf>,
    pub holdout_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            holdout_frac: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Report directory; relative paths are resolved like `data.path`.
    pub dir: PathBuf,
    pub plots: bool,
    /// Run the gradient-check suites and include their report.
    pub gradcheck: bool,
    /// Held-out sequences used for the saturation report.
    pub probe_sequences: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
            plots: true,
            gradcheck: true,
            probe_sequences: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub attention: AttentionSpec,
    pub train: TrainConfig,
    pub data: DataSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            d_model: m.d_model,
            heads: m.heads,
            mlp_hidden: m.mlp_hidden,
            vocab_size: m.vocab_size,
            max_seq_len: m.max_seq_len,
            attention: self.attention.clone(),
            tie_embeddings: m.tie_embeddings,
            init_std: m.init_std,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model_config().validate().map_err(|e| CliError::config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.output.probe_sequences == 0 {
            return Err(CliError::config("output.probe_sequences must be positive"));
        }
        Ok(())
    }
}

/// Parses `key.path=value`; the value is read as JSON when it parses and as
/// a plain string otherwise.
pub fn parse_override(s: &str) -> CliResult<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::config(format!("override key `{key}` has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

pub fn apply_override(doc: &mut Value, path: &[String], value: Value) -> CliResult<()> {
    let mut node = doc;
    for (i, key) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("`{}` is not an object", path[..i].join("."))))?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Reads `path` (or starts from all defaults when `None`), applies the
/// overrides in order and deserializes, rejecting unknown keys.
pub fn load(path: Option<&Path>, overrides: &[(Vec<String>, Value)]) -> CliResult<ExperimentConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for (key, value) in overrides {
        apply_override(&mut doc, key, value.clone())?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::config(e.to_string()))
}

/// `p` relative to the config file's directory, unless absolute.
pub fn resolve(config_path: Option<&Path>, p: &Path) -> PathBuf {
    match config_path.and_then(Path::parent) {
        Some(base) if p.is_relative() => base.join(p),
        _ => p.to_path_buf(),
    }
}
