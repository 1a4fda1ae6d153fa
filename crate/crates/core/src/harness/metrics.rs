//! Per-run metrics CSV.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "# augsched-metrics v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// During RL training.
    Rl,
    /// After the post-training distillation stage.
    Distilled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub epoch: usize,
    pub stage: Stage,
    pub method: String,
    pub seed: u64,
    pub train_return: f64,
    pub test_bg_return: f64,
    pub test_lv_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub aux_loss: f64,
    /// Empty when no non-identity augmentation is configured.
    pub policy_distance: Option<f64>,
    pub da_phase: bool,
}

impl MetricsRow {
    pub fn check_finite(&self) -> Result<()> {
        let fields = [
            ("train_return", self.train_return),
            ("test_bg_return", self.test_bg_return),
            ("test_lv_return", self.test_lv_return),
            ("policy_loss", self.policy_loss),
            ("value_loss", self.value_loss),
            ("entropy", self.entropy),
            ("aux_loss", self.aux_loss),
            ("policy_distance", self.policy_distance.unwrap_or(0.0)),
        ];
        match fields.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::NonFinite(format!(
                "metrics {name} = {v} at epoch {} ({} seed {})",
                self.epoch, self.method, self.seed
            ))),
            None => Ok(()),
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{METRICS_HEADER}").expect("write to vec");
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for row in rows {
            row.check_finite()?;
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if !text.starts_with(METRICS_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("missing `{METRICS_HEADER}` header line"),
        });
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| Ok(row?)).collect()
}
