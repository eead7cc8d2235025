use std::path::PathBuf;

use laser_core::analysis::{overflow_demo, AnalysisError};
use laser_core::DType;
use serde_json::Value;

use crate::error::{CliError, CliResult, ErrorKind};
use crate::report::{emit_json, versioned};

#[derive(Debug, Clone)]
pub struct OverflowArgs {
    pub dtype: DType,
    pub scale: f64,
    pub seed: u64,
    pub seq_len: usize,
    pub head_size: usize,
    pub out: Option<PathBuf>,
}

pub fn run(args: &OverflowArgs) -> CliResult<Value> {
    let report = overflow_demo(args.dtype, args.scale, args.seed, args.seq_len, args.head_size)
        .map_err(|e| match e {
            AnalysisError::Contract(m) => CliError::config(m),
            // The shift is the column max over the whole sequence, so rows
            // that only see much smaller values can still underflow.
            other => CliError::new(ErrorKind::Numeric, other.to_string()),
        })?;
    let doc = versioned("overflow_demo", &report);
    emit_json(args.out.as_deref(), &doc)?;
    Ok(doc)
}
