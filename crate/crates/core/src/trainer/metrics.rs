use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// Zero-based optimizer step.
    pub step: u64,
    pub stage_index: usize,
    pub seq_len: usize,
    pub loss: f64,
    /// Input tokens consumed including this step.
    pub tokens_seen: u64,
    /// Cumulative training wall time, or 0 when timing is not recorded.
    pub wall_time_s: f64,
}

/// Line-buffered JSONL writer; each record is flushed as it is written.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
            last_step: None,
        })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| r.step <= s) {
            return Err(Error::Contract(format!("metrics step {} out of order", r.step)));
        }
        self.last_step = Some(r.step);
        serde_json::to_writer(&mut self.out, r).map_err(|e| Error::Serde(e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Serde(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
