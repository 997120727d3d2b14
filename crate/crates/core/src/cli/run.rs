//! Training subcommands: one directory per seed holding the echoed config,
//! checkpoints, metrics and a summary.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Pipeline, RunPlan};
use crate::error::{Result, SpgError};
use crate::tasks::{baseline_finetune, load_or_generate, Split, TaskData, TaskSpec};
use crate::trainer::{evaluate, retrain, Checkpoint, EvalMetrics, MetricRecord, RunMetrics};

pub const SUMMARY_SCHEMA: &str = "spg.summary/1";

pub const CONFIG_ECHO: &str = "config.echo";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const SPG_CKPT: &str = "spg.ckpt";
pub const STRIPPED_CKPT: &str = "stripped.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accuracy: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clean_accuracy: Option<f64>,
}

impl Score {
    pub fn of(m: &EvalMetrics) -> Self {
        Score {
            accuracy: m.accuracy,
            loss: m.loss,
            mean_iou: m.mean_iou,
            clean_accuracy: m.clean_accuracy,
        }
    }

    pub fn from_record(r: &MetricRecord) -> Self {
        Score {
            accuracy: r.accuracy,
            loss: r.loss,
            mean_iou: r.mean_iou,
            clean_accuracy: r.clean_accuracy,
        }
    }
}

/// Test-split outcome of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub command: String,
    pub task: String,
    pub seed: u64,
    pub baseline: Score,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spg: Option<Score>,
    /// validation accuracy of every depth right after attaching the chain
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attach_depth_accuracy: Option<Vec<f64>>,
    /// survival fractions of every training epoch
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub survival: Option<Vec<Vec<f64>>>,
}

impl RunSummary {
    /// Every depth scored the same as the base network at attach time.
    pub fn attach_identity(&self) -> Option<bool> {
        self.attach_depth_accuracy
            .as_ref()
            .map(|d| d.iter().all(|&a| a == d[0]))
    }

    /// Survival fractions never increase with depth.
    pub fn survival_monotone(&self) -> Option<bool> {
        self.survival
            .as_ref()
            .map(|epochs| epochs.iter().all(|s| s.windows(2).all(|w| w[1] <= w[0])))
    }
}

pub fn load_data(spec: &TaskSpec, cache: Option<&Path>) -> Result<TaskData> {
    let get = |split| match cache {
        Some(dir) => load_or_generate(spec, split, dir),
        None => spec.generate(split),
    };
    Ok(TaskData {
        train: get(Split::Train)?,
        val: get(Split::Val)?,
        test: get(Split::Test)?,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| SpgError::io(path, e))
}

fn progress(log: &mut dyn Write, records: &[MetricRecord]) {
    for pair in records.chunks(2) {
        let train = &pair[0];
        let mut line = format!(
            "  epoch {:>2} {:<10} lr {:.1e} loss {:.4} acc {:.4}",
            train.epoch,
            format!("{:?}", train.phase).to_lowercase(),
            train.lr,
            train.loss,
            train.accuracy
        );
        if let Some(val) = pair.get(1) {
            line.push_str(&format!(" val {:.4}", val.accuracy));
        }
        if let Some(s) = &train.survival {
            let s: Vec<String> = s.iter().map(|v| format!("{v:.3}")).collect();
            line.push_str(&format!(" survival [{}]", s.join(" ")));
        }
        let _ = writeln!(log, "{line}");
    }
}

/// Run one seed of a training subcommand into `dir`.
pub fn execute(plan: &RunPlan, pipeline: Pipeline, dir: &Path, cache: Option<&Path>, log: &mut dyn Write) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| SpgError::io(dir, e))?;
    write(&dir.join(CONFIG_ECHO), plan.echo.as_bytes())?;
    let data = load_data(&plan.spec, cache)?;
    let mut metrics = RunMetrics::default();

    let (baseline_ckpt, baseline_score) = match &plan.baseline_checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if !ckpt.is_stripped() || ckpt.arch != plan.spec.reference_arch() {
                return Err(SpgError::invalid(format!(
                    "{} is not a baseline of the configured task",
                    path.display()
                )));
            }
            let score = Score::of(&evaluate(&ckpt.model()?, &data.test)?);
            (ckpt, score)
        }
        None => {
            let _ = writeln!(log, "baseline {} seed {}", plan.task_label(), plan.seed);
            let out = baseline_finetune(&plan.spec, &data, &plan.baseline, &plan.echo)?;
            progress(log, &out.metrics.records[..out.metrics.records.len() - 1]);
            out.checkpoint.save(&dir.join(BASELINE_CKPT))?;
            metrics.extend(out.metrics);
            (out.checkpoint, Score::of(&out.test))
        }
    };
    let _ = writeln!(log, "  baseline test accuracy {:.4}", baseline_score.accuracy);

    let mut summary = RunSummary {
        schema: SUMMARY_SCHEMA.to_string(),
        command: pipeline.name().to_string(),
        task: plan.task_label().to_string(),
        seed: plan.seed,
        baseline: baseline_score,
        spg: None,
        attach_depth_accuracy: None,
        survival: None,
    };

    if let Some(cfg) = &plan.retrain {
        let _ = writeln!(
            log,
            "{} {} seed {} ({} chain)",
            pipeline.name(),
            plan.task_label(),
            plan.seed,
            cfg.trp.as_ref().map_or("", |t| t.variant_name()),
        );
        let out = retrain(&baseline_ckpt, &data, cfg, &plan.echo)?;
        let recs = &out.metrics.records;
        progress(log, &recs[1..recs.len() - 1]);
        let _ = writeln!(
            log,
            "  attach depth accuracy {:?}\n  stripped test accuracy {:.4} (baseline {:.4})",
            out.attach_depth_accuracy, out.stripped_test.accuracy, out.baseline_test.accuracy
        );
        out.spg.save(&dir.join(SPG_CKPT))?;
        out.stripped.save(&dir.join(STRIPPED_CKPT))?;
        summary.spg = Some(Score::of(&out.stripped_test));
        summary.attach_depth_accuracy = Some(out.attach_depth_accuracy.clone());
        summary.survival = Some(
            out.metrics
                .records
                .iter()
                .filter(|r| r.split == Split::Train.name())
                .filter_map(|r| r.survival.clone())
                .collect(),
        );
        metrics.extend(out.metrics);
    }

    metrics.write_jsonl(&dir.join(METRICS_FILE))?;
    metrics.write_timing(&dir.join(TIMING_FILE))?;
    write(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Directory of one seed under an output root.
pub fn seed_dir(out: &Path, pipeline: Pipeline, seed: u64) -> PathBuf {
    out.join(pipeline.name()).join(format!("seed-{seed}"))
}
