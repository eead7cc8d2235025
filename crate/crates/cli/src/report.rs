use std::path::Path;

use serde::Serialize;

use crate::error::{io_error, CliResult};

/// Version of every JSON document this tool writes.
pub const SCHEMA_VERSION: u32 = 1;

pub fn to_pretty_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_text(path, &to_pretty_json(value))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Writes to `path`, or to stdout when it is absent.
pub fn emit_json(path: Option<&Path>, value: &impl Serialize) -> CliResult<()> {
    match path {
        Some(p) => write_json(p, value),
        None => {
            print!("{}", to_pretty_json(value));
            Ok(())
        }
    }
}

/// Adds `schema_version` and `kind` to a serializable report.
pub fn versioned(kind: &str, body: &impl Serialize) -> serde_json::Value {
    let mut v = serde_json::json!({ "schema_version": SCHEMA_VERSION, "kind": kind });
    if let serde_json::Value::Object(fields) = serde_json::to_value(body).expect("reports serialize") {
        v.as_object_mut().unwrap().extend(fields);
    }
    v
}
