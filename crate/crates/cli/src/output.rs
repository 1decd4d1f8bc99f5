//! Output conventions: every command leaves a resolved run-config JSON
//! (with the tool version) next to its artifacts, and all CSVs are UTF-8
//! with a header row.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::{CmdError, CmdResult, IntoCmd};

/// Resolved run description written next to command outputs.
pub fn write_run_config(
    path: &Path,
    command: &str,
    seed: u64,
    params: serde_json::Value,
) -> CmdResult {
    let doc = serde_json::json!({
        "tool": "evolve",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "params": params,
    });
    let mut f = std::fs::File::create(path).or_runtime()?;
    let body = serde_json::to_string_pretty(&doc).or_runtime()?;
    f.write_all(body.as_bytes()).or_runtime()?;
    f.write_all(b"\n").or_runtime()?;
    Ok(())
}

/// Run-config path for a command writing a single output file: sibling
/// `<stem>.run.json`.
pub fn run_config_sibling(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}.run.json"))
}

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> CmdResult {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).or_runtime()?);
    writeln!(f, "{header}").or_runtime()?;
    for row in rows {
        writeln!(f, "{row}").or_runtime()?;
    }
    f.flush().or_runtime()?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| CmdError::Runtime(anyhow::anyhow!("creating {}: {e}", dir.display())))
}

/// Format an optional cell; absent values stay empty.
pub fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
