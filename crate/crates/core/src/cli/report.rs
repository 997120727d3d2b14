//! Seed statistics over finished runs.
//!
//! A run directory is any directory holding a config echo. Its baseline
//! column is the last test record of the baseline phase in `metrics.jsonl`,
//! its SPG column the last test record of the final phase.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::{Score, CONFIG_ECHO, METRICS_FILE};
use crate::error::{Result, SpgError};
use crate::trainer::{Phase, RunMetrics};

pub const REPORT_SCHEMA: &str = "spg.report/1";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunScores {
    pub dir: PathBuf,
    pub baseline: Option<Score>,
    pub spg: Option<Score>,
}

/// Mean and sample standard deviation (`n - 1` denominator, zero for a
/// single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Stat { n, mean, std })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub runs: Vec<RunScores>,
    /// run directories whose metrics file is absent or unreadable
    pub missing: Vec<PathBuf>,
    /// keyed `column.metric`, e.g. `spg.accuracy` or `delta.accuracy`
    pub aggregate: BTreeMap<String, Stat>,
}

fn find_runs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.join(CONFIG_ECHO).is_file() || root.join(METRICS_FILE).is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    let entries = std::fs::read_dir(root).map_err(|e| SpgError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        find_runs(&d, out)?;
    }
    Ok(())
}

fn scores(metrics: &RunMetrics) -> (Option<Score>, Option<Score>) {
    let last = |phase| {
        metrics
            .records
            .iter()
            .rev()
            .find(|r| r.split == "test" && r.phase == phase)
            .map(Score::from_record)
    };
    (last(Phase::Baseline), last(Phase::Final))
}

/// Gather every run below `paths`. Missing or unreadable metrics files are
/// listed rather than fatal; finding no run at all is an error.
pub fn collect(paths: &[PathBuf]) -> Result<Report> {
    let mut dirs = Vec::new();
    for p in paths {
        if !p.is_dir() {
            return Err(SpgError::Missing(vec![p.clone()]));
        }
        find_runs(p, &mut dirs)?;
    }
    if dirs.is_empty() {
        return Err(SpgError::Missing(paths.to_vec()));
    }
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for dir in dirs {
        let path = dir.join(METRICS_FILE);
        let parsed = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| RunMetrics::from_jsonl(&t).ok());
        match parsed {
            Some(m) => {
                let (baseline, spg) = scores(&m);
                runs.push(RunScores { dir, baseline, spg });
            }
            None => missing.push(path),
        }
    }
    if runs.is_empty() {
        return Err(SpgError::Missing(missing));
    }
    Ok(Report {
        schema: REPORT_SCHEMA,
        aggregate: aggregate(&runs),
        runs,
        missing,
    })
}

type Field = fn(&Score) -> Option<f64>;

const FIELDS: [(&str, Field); 4] = [
    ("accuracy", |s| Some(s.accuracy)),
    ("loss", |s| Some(s.loss)),
    ("mean_iou", |s| s.mean_iou),
    ("clean_accuracy", |s| s.clean_accuracy),
];

pub fn aggregate(runs: &[RunScores]) -> BTreeMap<String, Stat> {
    let mut out = BTreeMap::new();
    for (name, field) in FIELDS {
        let column = |pick: fn(&RunScores) -> Option<&Score>| -> Vec<f64> {
            runs.iter().filter_map(|r| pick(r).and_then(field)).collect()
        };
        let base = column(|r| r.baseline.as_ref());
        let spg = column(|r| r.spg.as_ref());
        let delta: Vec<f64> = runs
            .iter()
            .filter_map(|r| Some(field(r.spg.as_ref()?)? - field(r.baseline.as_ref()?)?))
            .collect();
        for (col, values) in [("baseline", base), ("spg", spg), ("delta", delta)] {
            if let Some(s) = Stat::of(&values) {
                out.insert(format!("{col}.{name}"), s);
            }
        }
    }
    out
}

impl Report {
    pub fn table(&self) -> String {
        let cell = |key: String| match self.aggregate.get(&key) {
            Some(s) => format!("{:.4} ± {:.4} (n={})", s.mean, s.std, s.n),
            None => "-".to_string(),
        };
        let mut out = format!("{:<16} {:<26} {:<26} {:<26}\n", "metric", "baseline", "spg", "delta");
        for (name, _) in FIELDS {
            if !["baseline", "spg"].iter().any(|c| self.aggregate.contains_key(&format!("{c}.{name}"))) {
                continue;
            }
            let _ = writeln!(
                out,
                "{:<16} {:<26} {:<26} {:<26}",
                name,
                cell(format!("baseline.{name}")),
                cell(format!("spg.{name}")),
                cell(format!("delta.{name}"))
            );
        }
        let _ = writeln!(out, "runs: {}", self.runs.len());
        for m in &self.missing {
            let _ = writeln!(out, "missing: {}", m.display());
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let s = Stat::of(&[1.0, 2.0, 4.0]).unwrap();
        assert!((s.mean - 7.0 / 3.0).abs() < 1e-15);
        // Σ(x-m)² = 16/9 + 1/9 + 25/9 = 42/9, over n-1 = 2
        assert!((s.std - (21.0f64 / 9.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[0.5]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        match collect(&[dir.path().to_path_buf()]) {
            Err(SpgError::Missing(paths)) => assert_eq!(paths, vec![dir.path().to_path_buf()]),
            other => panic!("{other:?}"),
        }
    }
}
