//! Number formatting, CSV helpers and provenance sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// Round-trip exact text form of a float (17 significant digits).
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// JSON sidecar written next to every output file.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub software: &'static str,
    pub version: &'static str,
    pub command: String,
    pub inputs: Value,
    /// Excluded from determinism comparisons.
    pub wall_time_seconds: f64,
}

impl Provenance {
    pub fn new(command: impl Into<String>, inputs: Value, wall_time_seconds: f64) -> Self {
        Self {
            software: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            inputs,
            wall_time_seconds,
        }
    }
}

/// `<dir>/<stem>.provenance.json`
pub fn sidecar_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    output.with_file_name(format!("{stem}.provenance.json"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_provenance(output: &Path, prov: &Provenance) -> Result<PathBuf> {
    let path = sidecar_path(output);
    write_json(&path, prov)?;
    Ok(path)
}
