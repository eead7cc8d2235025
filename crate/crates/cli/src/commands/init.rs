use std::path::PathBuf;

use laser_core::model::{save_checkpoint, Model};
use laser_core::{DType, Scalar};
use serde_json::{json, Value};

use super::train::resolve_config;
use crate::config::ExperimentConfig;
use crate::error::{io_error, CliError, CliResult};

#[derive(Debug, Clone, Default)]
pub struct InitArgs {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub attention: Option<String>,
    pub out: PathBuf,
}

/// Writes a freshly initialized checkpoint for the configured model.
pub fn run(args: &InitArgs) -> CliResult<Value> {
    let cfg = resolve_config(args.config.as_deref(), &args.set, args.attention.as_deref())?;
    match cfg.train.dtype {
        DType::F32 => write::<f32>(&cfg, args),
        DType::F64 => write::<f64>(&cfg, args),
    }
}

fn write<T: Scalar>(cfg: &ExperimentConfig, args: &InitArgs) -> CliResult<Value> {
    let model = Model::<T>::init(cfg.model_config(), cfg.train.seed).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    save_checkpoint(&args.out, &model, json!({ "steps": 0, "seed": cfg.train.seed }))
        .map_err(|e| io_error(&args.out, e))?;
    Ok(json!({ "checkpoint": args.out, "parameters": model.params.num_params() }))
}
