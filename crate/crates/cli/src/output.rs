//! Artifacts: every file carries the resolved configuration and a hash of it.

use std::io::Write;
use std::path::Path;

use flowrde_core::kernels::GridFunction;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// SHA-256 over the command name and the canonical JSON of its inputs.
pub fn input_hash<T: Serialize>(command: &str, inputs: &T) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update([0u8]);
    hasher.update(serde_json::to_vec(inputs)?);
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Serialize)]
pub struct Envelope<'a, C: Serialize, R: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub input_hash: String,
    pub result: R,
}

impl<'a, C: Serialize, R: Serialize> Envelope<'a, C, R> {
    pub fn new(command: &'a str, config: &'a C, result: R) -> Result<Self> {
        Ok(Envelope { command, config, input_hash: input_hash(command, config)?, result })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CliError::io(path, e))
    }
}

/// Comment header lines for CSV artifacts.
pub fn csv_header<C: Serialize>(command: &str, config: &C) -> Result<String> {
    Ok(format!("# config: {}\n# input_hash: {}\n", serde_json::to_string(config)?, input_hash(command, config)?))
}

/// Writes `header` followed by a CSV table.
pub fn write_csv(path: &Path, header: &str, columns: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    file.write_all(header.as_bytes()).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(columns)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Column names and rows of a grid function: `t` then every component.
pub fn grid_table(f: &GridFunction, prefix: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let k = f.ncomp();
    let mut cols = vec!["t".to_string()];
    cols.extend((0..k).map(|c| format!("{prefix}{c}")));
    let rows = (0..f.grid.len())
        .map(|i| {
            let mut r = vec![f.grid.t(i)];
            r.extend_from_slice(f.at(i));
            r
        })
        .collect();
    (cols, rows)
}

/// Reads a CSV artifact, skipping the comment header.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let cols = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect());
    }
    Ok((cols, rows))
}
