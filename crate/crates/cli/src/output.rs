use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance record embedded in every output.
pub fn provenance(command: &str, config: &Value) -> Value {
    json!({ "tool": "ldgd", "tool_version": TOOL_VERSION, "command": command, "config": config })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::write(path, e))
}

/// Writes `{"provenance": .., "result": ..}` to `path`, or to stdout.
pub fn write_json(path: Option<&Path>, provenance: &Value, result: &impl Serialize) -> CliResult<()> {
    let doc = json!({ "provenance": provenance, "result": result });
    match path {
        Some(p) => {
            let mut w = create(p)?;
            serde_json::to_writer_pretty(&mut w, &doc)?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::write(p, e))
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(())
        }
    }
}

/// CSV writer whose first line is a `#` comment holding the provenance.
pub fn csv_writer(path: &Path, provenance: &Value) -> CliResult<csv::Writer<BufWriter<File>>> {
    let mut file = create(path)?;
    writeln!(file, "# {}", serde_json::to_string(provenance)?).map_err(|e| CliError::write(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn finish_csv(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| CliError::write(path, e))
}

pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}
