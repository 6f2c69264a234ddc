use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RUNLOG_HEADER: &str = "epoch,split,loss,accuracy,qwk,lr,peak_mem_bytes,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub qwk: f64,
    pub lr: f64,
    pub peak_mem_bytes: u64,
    pub seconds: f64,
}

impl LogRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.accuracy, self.qwk, self.lr, self.peak_mem_bytes, self.seconds
        )
    }
}

/// Per-epoch metrics, kept in memory and mirrored to a CSV file when one
/// is attached.
#[derive(Debug, Default)]
pub struct RunLog {
    rows: Vec<LogRow>,
    file: Option<File>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Creates (or truncates) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{RUNLOG_HEADER}")?;
        Ok(Self {
            rows: Vec::new(),
            file: Some(file),
        })
    }

    /// Opens an existing log for appending, loading its rows.
    pub fn append_to(path: &Path) -> Result<Self> {
        let rows = read_runlog(path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { rows, file: Some(file) })
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.iter().rev().find(|r| r.split == row.split) {
            if row.epoch < last.epoch {
                return Err(Error::Contract(format!(
                    "run log epoch {} after {} for split `{}`",
                    row.epoch, last.epoch, row.split
                )));
            }
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.to_line())?;
            f.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn last(&self, split: &str) -> Option<&LogRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

pub fn read_runlog(path: &Path) -> Result<Vec<LogRow>> {
    let mut lines = BufReader::new(File::open(path).map_err(|e| Error::load(path, e.to_string()))?).lines();
    match lines.next() {
        Some(Ok(h)) if h == RUNLOG_HEADER => {}
        _ => return Err(Error::load(path, format!("run log must start with `{RUNLOG_HEADER}`"))),
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::load(path, e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::load(path, e.to_string())))
        .collect()
}
