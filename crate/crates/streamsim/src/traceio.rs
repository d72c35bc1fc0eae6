//! Trace file I/O: the JSONL schema itself lives in the core crate; this
//! module just moves it through the filesystem.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use streamserve_core::workload::{format_trace, parse_trace, TraceRow};

pub fn load_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading trace {}", path.display()))?;
    Ok(parse_trace(&text)?)
}

pub fn save_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, format_trace(rows))
        .with_context(|| format!("writing trace {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use streamserve_core::workload::{generate_trace, WorkloadProfile};

    #[test]
    fn trace_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let profile = WorkloadProfile::builtin("alpaca").unwrap();
        let rows = generate_trace(&profile, 25, 3).unwrap();
        save_trace(&path, &rows).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(rows, back);
    }
}
