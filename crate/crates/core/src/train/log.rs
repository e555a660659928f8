use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Summary of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean symmetric pair loss over every task seen in the epoch.
    pub mean_loss: f64,
    /// Population standard deviation of those per-task losses.
    pub std_loss: f64,
    /// Wall-clock duration of the epoch.
    pub seconds: f64,
    /// Target-encoder version at the end of the epoch.
    pub param_version: u64,
}

impl EpochRecord {
    pub fn from_losses(epoch: usize, losses: &[f64], seconds: f64, param_version: u64) -> Self {
        let n = losses.len().max(1) as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        Self { epoch, mean_loss: mean, std_loss: var.sqrt(), seconds, param_version }
    }
}

/// One record per completed epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Append one JSON line for `record`.
    pub fn append_jsonl(path: &Path, record: &EpochRecord) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(record).expect("record serializes"))?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.mean_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }
}
