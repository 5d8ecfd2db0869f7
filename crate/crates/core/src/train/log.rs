//! Append-only CSV logs of a training run: per-epoch metrics, per-step
//! cost-weight rows and per-sample rewards.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::losses::RewardRecord;
use super::state::MetricsRow;
use crate::error::{MiaError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const REWARDS_FILE: &str = "rewards.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub task_loss: f64,
    pub cost_loss: f64,
    pub exec_ratio: f64,
    pub target_ratio: f64,
    pub alpha: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub epoch: usize,
    pub step: u64,
    pub sample_id: u64,
    pub y: u8,
    pub exec_ratio: f64,
    pub target_ratio: f64,
    pub beta: f64,
    pub reward: f64,
}

impl RewardRow {
    pub fn record(&self) -> RewardRecord {
        RewardRecord {
            y: self.y,
            exec_ratio: self.exec_ratio,
            target_ratio: self.target_ratio,
            beta: self.beta,
            reward: self.reward,
        }
    }
}

/// Rows kept in memory and, with an output directory, appended to CSV.
#[derive(Debug, Default)]
pub struct RunLog {
    dir: Option<PathBuf>,
    pub metrics: Vec<MetricsRow>,
    pub steps: Vec<StepRow>,
    pub rewards: Vec<RewardRow>,
    /// Keep per-sample rewards in memory (they are always written to disk).
    pub keep_rewards: bool,
}

impl RunLog {
    pub fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| MiaError::io(d, e))?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            keep_rewards: true,
            ..Self::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn metric(&mut self, row: MetricsRow) -> Result<()> {
        self.append(METRICS_FILE, std::slice::from_ref(&row))?;
        self.metrics.push(row);
        Ok(())
    }

    pub fn step(&mut self, row: StepRow) -> Result<()> {
        self.append(STEPS_FILE, std::slice::from_ref(&row))?;
        self.steps.push(row);
        Ok(())
    }

    pub fn rewards(&mut self, rows: Vec<RewardRow>) -> Result<()> {
        self.append(REWARDS_FILE, &rows)?;
        if self.keep_rewards {
            self.rewards.extend(rows);
        }
        Ok(())
    }

    fn append<R: Serialize>(&self, file: &str, rows: &[R]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        append_csv(&dir.join(file), rows)
    }
}

pub fn append_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MiaError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
    for r in rows {
        w.serialize(r).map_err(|e| MiaError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| MiaError::io(path, e))
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MiaError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|e| MiaError::Data(format!("{}: {e}", path.display())))
}
