//! Run directory layout and the line-delimited metrics log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Result, SaipError};
use crate::losses::LossReport;

pub const RUN_DIR_ENV: &str = "SAIP_RUN_DIR";
pub const DEFAULT_RUN_ROOT: &str = "runs";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of `metrics.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub l_csm: f64,
    pub l_csr: f64,
    pub l_css: f64,
    pub total: f64,
    pub lr: f64,
}

impl MetricsRecord {
    pub fn new(step: u64, epoch: u64, report: &LossReport, lr: f64) -> Self {
        MetricsRecord {
            step,
            epoch,
            l_csm: report.l_csm,
            l_csr: report.l_csr,
            l_css: report.l_css,
            total: report.total,
            lr,
        }
    }
}

/// Root under which run directories are created: `$SAIP_RUN_DIR` or `runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Opens (creating if needed) the directory of a run and snapshots the
    /// config into it.
    pub fn create(root: &Path, config: &ExperimentConfig) -> Result<Self> {
        let name = config.run_name.clone().unwrap_or_else(|| config.hash());
        let path = root.join(name);
        std::fs::create_dir_all(path.join(CHECKPOINT_DIR)).map_err(|e| SaipError::io(&path, e))?;
        let cfg = path.join(CONFIG_FILE);
        std::fs::write(&cfg, config.to_toml_string()).map_err(|e| SaipError::io(&cfg, e))?;
        Ok(RunDir { path })
    }

    pub fn open(path: impl Into<PathBuf>) -> Self {
        RunDir { path: path.into() }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join(METRICS_FILE)
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join(CONFIG_FILE)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.path.join(CHECKPOINT_DIR)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.checkpoint_dir().join(format!("step_{step:08}.saip"))
    }

    pub fn latest_checkpoint_path(&self) -> PathBuf {
        self.checkpoint_dir().join("last.saip")
    }

    pub fn log_metrics(&self, record: &MetricsRecord) -> Result<()> {
        append_record(&self.metrics_path(), record)
    }
}

/// Appends one JSON record as a single `write` of a full line.
pub fn append_record<R: Serialize>(path: &Path, record: &R) -> Result<()> {
    let mut line = serde_json::to_vec(record).expect("record serialises");
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| SaipError::io(path, e))?;
    f.write_all(&line).map_err(|e| SaipError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| SaipError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| SaipError::Invalid(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
