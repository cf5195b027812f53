//! Deterministic result files: CSV tables, provenance records, and a
//! fixed-width text renderer for the terminal.
//!
//! All floats go through [`fmt_float`] so repeated runs produce
//! byte-identical artifacts.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::file_sha256;
use crate::error::{CoreError, Result};

/// Canonical float formatting for every emitted number.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.6}")
}

/// Write a CSV file, creating parent directories as needed. Values must
/// not contain commas or newlines; the writers in this crate never emit
/// them.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "csv row width mismatch");
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

/// Read back a CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CoreError::corrupt(path, "empty csv"))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if row.len() != header.len() {
            return Err(CoreError::corrupt(
                path,
                format!("row width {} != header width {}", row.len(), header.len()),
            ));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// What produced an artifact: the resolved-config hash, the run seed, and
/// the hash of every checkpoint that fed into it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoints: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Provenance {
        Provenance { config_hash, seed, checkpoints: BTreeMap::new() }
    }

    /// Record `name` as depending on the file at `path` (by content hash).
    pub fn add_checkpoint(&mut self, name: &str, path: &Path) -> Result<()> {
        self.checkpoints.insert(name.to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Config(format!("provenance serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Provenance> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::corrupt(path, e.to_string()))
    }
}

/// Render rows as a fixed-width table with a header rule, for terminal
/// output. Column widths fit the longest cell.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(ncol) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{:<width$}", cell, width = widths[i]));
        }
        line.trim_end().to_string()
    };
    let header_cells: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    out.push_str(&fmt_row(&header_cells, &widths));
    out.push('\n');
    let rule_len = widths.iter().sum::<usize>() + 2 * (ncol.saturating_sub(1));
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}
