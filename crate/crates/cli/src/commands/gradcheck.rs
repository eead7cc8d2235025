use std::path::PathBuf;

use laser_core::gradcheck::{run_gradcheck, GradcheckOptions, Scope};
use laser_core::tensor::Fault;
use serde_json::Value;

use crate::error::{CliError, CliResult, ErrorKind};
use crate::report::{emit_json, versioned};

#[derive(Debug, Clone, Default)]
pub struct GradcheckArgs {
    /// Empty means every scope.
    pub scopes: Vec<Scope>,
    pub seed: u64,
    pub fault: Option<Fault>,
    pub out: Option<PathBuf>,
}

/// Writes the report, then fails with exit code 1 if any check failed.
pub fn run(args: &GradcheckArgs) -> CliResult<Value> {
    let scopes = if args.scopes.is_empty() { Scope::ALL.to_vec() } else { args.scopes.clone() };
    let report = run_gradcheck(&scopes, GradcheckOptions { seed: args.seed, fault: args.fault });
    let doc = versioned("gradcheck", &report);
    emit_json(args.out.as_deref(), &doc)?;
    if report.passed {
        Ok(doc)
    } else {
        let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(CliError::new(ErrorKind::ChecksFailed, format!("{} check(s) failed", failed.len()))
            .with_details(serde_json::json!({ "failed": failed })))
    }
}
