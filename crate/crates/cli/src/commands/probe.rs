use std::path::PathBuf;

use laser_core::analysis::{saturation_report, thresholds_with_defaults};
use laser_core::model::{load_checkpoint, Checkpoint};
use laser_core::train::Corpus;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult, ErrorKind};
use crate::report::{emit_json, versioned};

#[derive(Debug, Clone)]
pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Extra thresholds on top of the defaults.
    pub thresholds: Vec<f64>,
    pub sequences: usize,
    /// Defaults to the model's maximum sequence length.
    pub seq_len: Option<usize>,
    pub holdout_frac: f64,
    pub include_masked: bool,
    pub out: Option<PathBuf>,
}

/// Saturation report of a checkpoint on held-out windows of `data`.
pub fn run(args: &ProbeArgs) -> CliResult<Value> {
    let ckpt: Checkpoint<f64> = load_checkpoint(&args.checkpoint)
        .map_err(|e| CliError::new(ErrorKind::Checkpoint, format!("{}: {e}", args.checkpoint.display())))?;
    let model = ckpt.model;
    let bytes = std::fs::read(&args.data).map_err(|e| CliError::data(format!("{}: {e}", args.data.display())))?;
    let corpus = Corpus::from_bytes(bytes, args.holdout_frac).map_err(super::train::train_error)?;
    if corpus.max_token() >= model.config.vocab_size {
        return Err(CliError::data(format!(
            "corpus byte {} outside the checkpoint's vocabulary of {}",
            corpus.max_token(),
            model.config.vocab_size
        )));
    }
    let seq_len = args.seq_len.unwrap_or(model.config.max_seq_len);
    if seq_len == 0 || seq_len > model.config.max_seq_len || args.sequences == 0 {
        return Err(CliError::config(format!(
            "need 1..={} tokens per sequence and at least one sequence",
            model.config.max_seq_len
        )));
    }
    let windows = corpus.eval_windows(args.sequences, seq_len).map_err(super::train::train_error)?;
    let thresholds = thresholds_with_defaults(&args.thresholds);
    let report = saturation_report(&model, &windows, &thresholds, !args.include_masked)
        .map_err(|e| CliError::new(ErrorKind::Numeric, e.to_string()))?;
    let body = json!({
        "checkpoint": args.checkpoint,
        "stored_dtype": ckpt.stored_dtype,
        "checkpoint_metadata": ckpt.metadata,
        "data": args.data,
        "report": report,
    });
    let doc = versioned("saturation_report", &body);
    emit_json(args.out.as_deref(), &doc)?;
    Ok(doc)
}
