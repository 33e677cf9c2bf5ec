use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::train::{ExperimentRecord, TrainRecord};
use crate::error::Result;
use crate::seg::MetricsReport;

/// `<out>/<run_id>/` with `config.snapshot`, `losses.csv`, `metrics.csv`,
/// `sweep.csv` and `checkpoints/` as applicable.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path, run_id: &str) -> Result<Self> {
        let path = out.join(run_id);
        std::fs::create_dir_all(path.join("checkpoints"))?;
        Ok(Self { path })
    }

    pub fn open(path: &Path) -> Self {
        Self {
            path: path.to_path_buf(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.path.join("checkpoints")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }

    pub fn sweep_path(&self) -> PathBuf {
        self.path.join("sweep.csv")
    }

    /// Effective configuration as TOML.
    pub fn write_snapshot(&self, cfg: &ExperimentConfig) -> Result<()> {
        std::fs::write(self.path.join("config.snapshot"), cfg.to_toml()?)?;
        Ok(())
    }

    pub fn write_losses(&self, trace: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path.join("losses.csv"))?;
        w.write_record(["epoch", "loss"])?;
        for (i, l) in trace.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{l:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_metrics(&self, report: &MetricsReport) -> Result<()> {
        report.write_csv(&self.metrics_path())
    }

    /// `record.json` without the wall-clock time, so reruns compare equal.
    pub fn write_record(&self, rec: &ExperimentRecord) -> Result<()> {
        let mut v = serde_json::to_value(rec)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_time_s");
        }
        std::fs::write(self.path.join("record.json"), serde_json::to_string_pretty(&v)?)?;
        Ok(())
    }

    pub fn write_train_record(&self, rec: &TrainRecord) -> Result<()> {
        std::fs::write(self.path.join("train_record.json"), serde_json::to_string_pretty(rec)?)?;
        Ok(())
    }
}
