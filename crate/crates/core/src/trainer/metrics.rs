//! Per-epoch metric records.
//!
//! `metrics.jsonl` holds one JSON object per (epoch, split) and contains
//! nothing that depends on the machine, so repeated runs produce identical
//! bytes. Wall-clock durations go to a separate `timing.jsonl`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpgError};

pub const METRICS_SCHEMA: &str = "spg.metrics/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// state of the network before any update
    Entry,
    Baseline,
    ColdStart,
    Spg,
    /// held-out evaluation of the finished (stripped) network
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema: String,
    pub epoch: usize,
    pub split: String,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_iou: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clean_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_step_length: Option<f64>,
    /// fraction of units with `M_t = 1`, for `t = 0..=T`
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub survival: Option<Vec<f64>>,
    /// eval accuracy of `π_t` for every depth, when requested
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub depth_accuracy: Option<Vec<f64>>,
    #[serde(skip)]
    pub seconds: f64,
}

impl MetricRecord {
    pub fn new(epoch: usize, split: &str, phase: Phase) -> Self {
        MetricRecord {
            schema: METRICS_SCHEMA.to_string(),
            epoch,
            split: split.to_string(),
            phase,
            lr: 0.0,
            loss: 0.0,
            accuracy: 0.0,
            mean_iou: None,
            class_iou: None,
            clean_accuracy: None,
            mean_step_length: None,
            survival: None,
            depth_accuracy: None,
            seconds: 0.0,
        }
    }
}

#[derive(Serialize)]
struct TimingRecord<'a> {
    epoch: usize,
    split: &'a str,
    phase: Phase,
    seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
}

impl RunMetrics {
    pub fn push(&mut self, record: MetricRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: RunMetrics) {
        self.records.extend(other.records);
    }

    pub fn last(&self, split: &str) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<MetricRecord>, _>>()?;
        if let Some(r) = records.iter().find(|r| r.schema != METRICS_SCHEMA) {
            return Err(SpgError::Format(format!("unsupported metrics schema {}", r.schema)));
        }
        Ok(RunMetrics { records })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| SpgError::io(path, e))
    }

    pub fn write_timing(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| SpgError::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(&TimingRecord {
                epoch: r.epoch,
                split: &r.split,
                phase: r.phase,
                seconds: r.seconds,
            })?;
            writeln!(f, "{line}").map_err(|e| SpgError::io(path, e))?;
        }
        Ok(())
    }
}
