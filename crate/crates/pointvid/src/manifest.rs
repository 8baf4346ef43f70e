//! Run manifests and the JSONL metrics log.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{PvError, Result};
use crate::formats::write_atomic;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully defaulted configuration the command ran with.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn begin(command: &str, config: impl Serialize, seed: u64) -> Self {
        Self {
            command: command.into(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    /// Stamps the end time and writes `<dir>/manifest.json` via rename.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| PvError::io(dir, e))?;
        self.finish_at(&dir.join(MANIFEST))
    }

    pub fn finish_at(mut self, path: &Path) -> Result<PathBuf> {
        self.finished_unix_ms = now_ms();
        let path = path.to_path_buf();
        let mut s = serde_json::to_string_pretty(&self).map_err(|e| PvError::Json { path: path.clone(), source: e })?;
        s.push('\n');
        write_atomic(&path, s.as_bytes())?;
        Ok(path)
    }
}

/// One line of `metrics.jsonl`. Optional fields are written as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub l_diff: f64,
    pub l_recon: Option<f64>,
    pub l_rigid: Option<f64>,
    pub total: f64,
    pub point_mse: Option<f64>,
    pub wall_clock_ms: Option<f64>,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| PvError::io(path, e))?;
        Ok(Self { path: path.into(), out: BufWriter::new(f) })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| PvError::Json { path: self.path.clone(), source: e })?;
        writeln!(self.out, "{line}").map_err(|e| PvError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| PvError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = fs::File::open(path).map_err(|e| PvError::io(path, e))?;
    std::io::BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| PvError::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| PvError::Json { path: path.into(), source: e })
        })
        .collect()
}
