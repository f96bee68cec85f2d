use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One CSV row: `step, samples`, then the experiment's metrics. Missing
/// values are written as empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub samples: u64,
    pub values: Vec<Option<f64>>,
}

pub struct MetricsWriter {
    path: PathBuf,
    width: usize,
    last_step: Option<u64>,
    out: csv::Writer<File>,
}

fn header(columns: &[&str]) -> Vec<String> {
    let mut h = vec!["step".to_string(), "samples".to_string()];
    h.extend(columns.iter().map(|c| c.to_string()));
    h
}

impl MetricsWriter {
    /// Creates (or truncates) the file and writes the header.
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self> {
        let mut out = csv::Writer::from_writer(File::create(path)?);
        out.write_record(header(columns))?;
        out.flush()?;
        Ok(Self {
            path: path.to_path_buf(),
            width: columns.len(),
            last_step: None,
            out,
        })
    }

    /// Reopens an existing file, dropping rows past `step` so a resumed run
    /// rewrites them exactly as an uninterrupted one would.
    pub fn resume(path: &Path, columns: &[&str], step: u64) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let found: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if found != header(columns) {
            return Err(Error::Format(format!("{} has columns {found:?}", path.display())));
        }
        let mut keep = Vec::new();
        let mut last = None;
        for rec in rd.records() {
            let rec = rec?;
            let s: u64 = rec
                .get(0)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad step cell in {}", path.display())))?;
            if s <= step {
                last = Some(s);
                keep.push(rec);
            }
        }
        let mut w = Self::create(path, columns)?;
        for rec in &keep {
            w.out.write_record(rec)?;
        }
        w.out.flush()?;
        w.last_step = last;
        Ok(w)
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if row.values.len() != self.width {
            return Err(Error::shape("metrics row", format!("{} values for {} columns", row.values.len(), self.width)));
        }
        if self.last_step.is_some_and(|s| row.step <= s) {
            return Err(Error::State(format!("metrics step {} does not increase", row.step)));
        }
        let mut rec = vec![row.step.to_string(), row.samples.to_string()];
        rec.extend(row.values.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
        self.out.write_record(&rec)?;
        self.out.flush()?;
        self.last_step = Some(row.step);
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
