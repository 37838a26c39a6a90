//! Append-only CSV training log:
//!
//! ```text
//! # variant=ours
//! step,loss_initial,loss_final,lr,seconds
//! 0,0.6931,0.6931,0.01,0.002
//! ```
//!
//! Losses are per-pair means over the step's batch.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Variant;
use crate::error::{Error, Result};

pub const HEADER: &str = "step,loss_initial,loss_final,lr,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{:.3}", self.step, self.loss_initial, self.loss_final, self.lr, self.seconds)
    }

    fn parse(line: &str) -> std::result::Result<LogRow, String> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(format!("expected 5 fields, found {}", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("not a number: `{s}`"));
        Ok(LogRow {
            step: f[0].parse().map_err(|_| format!("bad step `{}`", f[0]))?,
            loss_initial: num(f[1])?,
            loss_final: num(f[2])?,
            lr: num(f[3])?,
            seconds: num(f[4])?,
        })
    }
}

pub struct TrainLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TrainLog {
    /// Creates (truncating) a log and writes its preamble.
    pub fn create(path: &Path, variant: Variant) -> Result<TrainLog> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        log.write_line(&format!("# variant={variant}"))?;
        log.write_line(HEADER)?;
        Ok(log)
    }

    /// Opens an existing log for appending.
    pub fn append_to(path: &Path) -> Result<TrainLog> {
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(TrainLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, row: &LogRow) -> Result<()> {
        self.write_line(&row.to_csv())
    }
}

/// Reads a log back: the variant named in its preamble, if any, and rows.
pub fn read_log(path: &Path) -> Result<(Option<Variant>, Vec<LogRow>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut variant = None;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == HEADER {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("variant=") {
                variant = Some(v.parse()?);
            }
            continue;
        }
        rows.push(LogRow::parse(line).map_err(|m| Error::format(path, format!("line {}: {m}", n + 1)))?);
    }
    Ok((variant, rows))
}
