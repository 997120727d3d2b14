//! Synthetic tasks covering the three reward granularities: one unit per
//! image (blobs classification), `H * W * 2` units per image (shape
//! segmentation with a main and an auxiliary readout) and `L` units per
//! sequence (pattern language modelling).

mod blobs;
mod dataset;
mod pattern;
mod shapes;

pub use blobs::{bayes_accuracy, gen_blobs_classification};
pub use dataset::{cache_key, load_or_generate, Batch, BatchInput, Dataset, TaskData};
pub use pattern::gen_pattern_lm;
pub use shapes::{gen_shapes_segmentation, PATCH};

use serde::{Deserialize, Serialize};

use crate::autodiff::streams;
use crate::error::{Result, SpgError};
use crate::trainer::{evaluate, Checkpoint, EvalMetrics, Phase, RunMetrics, TrainConfig, Trainer};
use crate::trp::{ArchSpec, SpgModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
    LanguageModeling,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
            TaskKind::LanguageModeling => "language_modeling",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = SpgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "blobs" => Ok(TaskKind::Classification),
            "segmentation" | "shapes" => Ok(TaskKind::Segmentation),
            "language_modeling" | "lm" | "pattern" => Ok(TaskKind::LanguageModeling),
            other => Err(SpgError::invalid(format!("unknown task kind {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|s| s.tag() == tag)
            .ok_or_else(|| SpgError::Format(format!("unknown split tag {tag}")))
    }

    /// Each split draws from its own random stream.
    pub(crate) fn stream(self) -> u64 {
        streams::DATA + u64::from(self.tag())
    }
}

impl std::str::FromStr for Split {
    type Err = SpgError;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| SpgError::invalid(format!("unknown split {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Geometry {
    /// Class `k` is centred at `separation * e_k`; per-dimension standard
    /// deviation is `noise * scales[j]` (all ones when `scales` is empty).
    Blobs {
        classes: usize,
        dim: usize,
        separation: f64,
        scales: Vec<f64>,
    },
    /// `shapes` non-overlapping rectangles (class 1) or crosses (class 2)
    /// on a background of class 0, each inside its own 4x4 cell.
    Shapes {
        height: usize,
        width: usize,
        shapes: usize,
    },
    /// Repeating motif of `period` distinct tokens; each sample has
    /// `seq_len` prediction positions seeing `window` tokens each.
    Pattern {
        vocab: usize,
        seq_len: usize,
        window: usize,
        period: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub geometry: Geometry,
    pub counts: SplitCounts,
    /// Gaussian standard deviation (blobs, shapes) or substitution rate (pattern).
    pub noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self.geometry {
            Geometry::Blobs { .. } => TaskKind::Classification,
            Geometry::Shapes { .. } => TaskKind::Segmentation,
            Geometry::Pattern { .. } => TaskKind::LanguageModeling,
        }
    }

    /// Three overlapping blobs in 8 dimensions; Bayes accuracy 0.866.
    pub fn blobs_preset(seed: u64) -> Self {
        TaskSpec {
            geometry: Geometry::Blobs {
                classes: 3,
                dim: 8,
                separation: 2.0,
                scales: Vec::new(),
            },
            counts: SplitCounts {
                train: 3000,
                val: 500,
                test: 3000,
            },
            noise: 1.0,
            seed,
        }
    }

    pub fn shapes_preset(seed: u64) -> Self {
        TaskSpec {
            geometry: Geometry::Shapes {
                height: 16,
                width: 16,
                shapes: 4,
            },
            counts: SplitCounts {
                train: 96,
                val: 16,
                test: 32,
            },
            noise: 0.35,
            seed,
        }
    }

    pub fn pattern_preset(seed: u64) -> Self {
        TaskSpec {
            geometry: Geometry::Pattern {
                vocab: 12,
                seq_len: 8,
                window: 3,
                period: 5,
            },
            counts: SplitCounts {
                train: 400,
                val: 100,
                test: 1000,
            },
            noise: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(SpgError::invalid(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        match &self.geometry {
            Geometry::Blobs {
                classes,
                dim,
                separation,
                scales,
            } => {
                if *classes < 2 {
                    return Err(SpgError::invalid("blobs need at least 2 classes"));
                }
                if !(2..=16).contains(dim) || dim < classes {
                    return Err(SpgError::invalid(format!(
                        "blobs dimension must be in 2..=16 and >= classes, got {dim}"
                    )));
                }
                if !(separation.is_finite() && *separation > 0.0) {
                    return Err(SpgError::invalid("blob separation must be positive"));
                }
                if !scales.is_empty() && scales.len() != *dim {
                    return Err(SpgError::invalid("one scale per dimension required"));
                }
                if self.noise == 0.0 || scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(SpgError::invalid("degenerate blob covariance"));
                }
            }
            Geometry::Shapes { height, width, shapes } => {
                if *height < 4 || *width < 4 {
                    return Err(SpgError::invalid("segmentation grid must be at least 4x4"));
                }
                let capacity = (height / 4) * (width / 4);
                if *shapes > capacity {
                    return Err(SpgError::invalid(format!(
                        "{shapes} shapes exceed the grid capacity of {capacity}"
                    )));
                }
            }
            Geometry::Pattern {
                vocab,
                seq_len,
                window,
                period,
            } => {
                if *vocab < 2 || *seq_len < 2 || *window < 1 {
                    return Err(SpgError::invalid("pattern task needs vocab >= 2, seq_len >= 2, window >= 1"));
                }
                if !(2..=*vocab).contains(period) {
                    return Err(SpgError::invalid("motif period must be in 2..=vocab"));
                }
                if self.noise >= 1.0 {
                    return Err(SpgError::invalid("substitution rate must be < 1"));
                }
            }
        }
        if self.counts.train == 0 || self.counts.val == 0 || self.counts.test == 0 {
            return Err(SpgError::invalid("every split needs at least one sample"));
        }
        Ok(())
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        match self.geometry {
            Geometry::Blobs { .. } => gen_blobs_classification(self, split),
            Geometry::Shapes { .. } => gen_shapes_segmentation(self, split),
            Geometry::Pattern { .. } => gen_pattern_lm(self, split),
        }
    }

    pub fn generate_all(&self) -> Result<TaskData> {
        Ok(TaskData {
            train: self.generate(Split::Train)?,
            val: self.generate(Split::Val)?,
            test: self.generate(Split::Test)?,
        })
    }

    /// Reference network for this task.
    pub fn reference_arch(&self) -> ArchSpec {
        match &self.geometry {
            Geometry::Blobs { classes, dim, .. } => ArchSpec {
                kind: TaskKind::Classification,
                input_dim: *dim,
                vocab: 0,
                embed_dim: 0,
                hidden: vec![32, 32],
                classes: *classes,
                aux_from: None,
            },
            Geometry::Shapes { .. } => ArchSpec {
                kind: TaskKind::Segmentation,
                input_dim: PATCH * PATCH,
                vocab: 0,
                embed_dim: 0,
                hidden: vec![24, 24],
                classes: 3,
                aux_from: Some(0),
            },
            Geometry::Pattern { vocab, window, .. } => ArchSpec {
                kind: TaskKind::LanguageModeling,
                input_dim: *window,
                vocab: *vocab,
                embed_dim: 8,
                hidden: vec![32],
                classes: *vocab,
                aux_from: None,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
    pub test: EvalMetrics,
}

/// Train the task's reference network from scratch with cross-entropy. The
/// result is the comparison point for every retraining run.
pub fn baseline_finetune(spec: &TaskSpec, data: &TaskData, config: &TrainConfig, config_echo: &str) -> Result<BaselineOutcome> {
    if config.trp.is_some() {
        return Err(SpgError::invalid("baseline training takes no replica chain"));
    }
    let model = SpgModel::new(spec.reference_arch(), config.seed)?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut metrics = RunMetrics::default();
    trainer.fit(data, &mut metrics)?;
    let model = trainer.into_model();
    let test = evaluate(&model, &data.test)?;
    metrics.push(test.record(config.epochs, Split::Test, Phase::Baseline));
    Ok(BaselineOutcome {
        checkpoint: Checkpoint {
            config_echo: config_echo.to_string(),
            ..Checkpoint::from_model(&model)
        },
        metrics,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TaskSpec::blobs_preset(0).validate().unwrap();
        TaskSpec::shapes_preset(0).validate().unwrap();
        TaskSpec::pattern_preset(0).validate().unwrap();
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("segmentation".parse::<TaskKind>().unwrap(), TaskKind::Segmentation);
        assert!("speech".parse::<TaskKind>().is_err());
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("holdout".parse::<Split>().is_err());
    }

    #[test]
    fn over_capacity_rejected() {
        let mut s = TaskSpec::shapes_preset(0);
        s.geometry = Geometry::Shapes {
            height: 8,
            width: 8,
            shapes: 5,
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let mut s = TaskSpec::blobs_preset(0);
        s.noise = 0.0;
        assert!(s.validate().is_err());
        let mut s = TaskSpec::blobs_preset(0);
        s.geometry = Geometry::Blobs {
            classes: 3,
            dim: 3,
            separation: 2.0,
            scales: vec![1.0, 0.0, 1.0],
        };
        assert!(s.validate().is_err());
    }
}
