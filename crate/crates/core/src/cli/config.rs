//! Run configuration files.
//!
//! Files are TOML with five optional sections. Every key is optional and
//! falls back to the defaults of the subcommand being run; unknown keys are
//! rejected with the line they appear on.
//!
//! ```text
//! [task]
//! preset = "blobs"        # blobs | shapes | pattern
//! data_seed = 7           # defaults to the run seed
//! noise = 1.0
//! train = 3000            # sample counts per split
//! val = 500
//! test = 3000
//!
//! [baseline]
//! epochs = 12
//! lr = 0.001
//! batch_size = 32
//! optimizer = "adamw"     # adamw | sgd
//! weight_decay = 0.0
//!
//! [retrain]
//! epochs = 13             # cold-start epochs included
//! cold_start_epochs = 3
//! lr = 0.0004
//! schedule = "constant"   # constant | step
//! decay_factor = 0.5
//! decay_every = 2
//! optimizer = "adamw"
//! batch_size = 32
//! weight_decay = 0.0
//! return_form = "weighted"  # weighted | unweighted
//!
//! [trp]
//! variant = "hpo"         # hpo | nas
//! rates = [0.2, 0.2, 0.2] # hpo: one rate per module
//! depth = 3               # nas: module count
//! blocks = 1              # nas: residual blocks per module
//! lambdas = [0.4, 0.2, 0.1]
//!
//! [run]
//! seeds = [0, 1, 2]
//! baseline = "runs/baseline/seed-0/baseline.ckpt"  # reuse instead of training
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerKind;
use crate::error::{Result, SpgError};
use crate::tasks::{Geometry, TaskSpec};
use crate::trainer::{LrSchedule, TrainConfig};
use crate::trajectory::ReturnForm;
use crate::trp::TrpConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cold_start_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub return_form: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrpSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub baseline: TrainSection,
    #[serde(default)]
    pub retrain: TrainSection,
    #[serde(default)]
    pub trp: TrpSection,
    #[serde(default)]
    pub run: RunSection,
}

/// What a training subcommand does after the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    Baseline,
    Retrain,
    Nas,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Baseline => "baseline",
            Pipeline::Retrain => "retrain",
            Pipeline::Nas => "nas",
        }
    }
}

/// Fully resolved inputs of one seed's run.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub seed: u64,
    pub spec: TaskSpec,
    pub baseline: TrainConfig,
    pub retrain: Option<TrainConfig>,
    pub baseline_checkpoint: Option<PathBuf>,
    /// configuration text that reproduces this plan on its own
    pub echo: String,
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]`, if the file sets it.
fn key_line(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section && line.split('=').next().map(str::trim) == Some(key) {
            return i + 1;
        }
    }
    0
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SpgError::Config {
            line: e.span().map_or(0, |s| line_of_offset(text, s.start)),
            message: e.message().trim().to_string(),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SpgError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }

    /// Seeds to run: an explicit override wins over the file, which wins
    /// over a single seed 0.
    pub fn seeds(&self, override_seed: Option<u64>) -> Vec<u64> {
        match override_seed {
            Some(s) => vec![s],
            None => self.run.seeds.clone().unwrap_or_else(|| vec![0]),
        }
    }

    /// Resolve every default for one seed. `source` is the file text the
    /// configuration came from; semantic errors are reported at the line of
    /// the offending key.
    pub fn plan(&self, pipeline: Pipeline, seed: u64, source: &str) -> Result<RunPlan> {
        let at = |section: &str, key: &str, message: String| SpgError::Config {
            line: key_line(source, section, key),
            message: format!("{section}.{key}: {message}"),
        };

        let preset = self.task.preset.as_deref().unwrap_or("blobs");
        let data_seed = self.task.data_seed.unwrap_or(seed);
        let mut spec = match preset {
            "blobs" => TaskSpec::blobs_preset(data_seed),
            "shapes" => TaskSpec::shapes_preset(data_seed),
            "pattern" => TaskSpec::pattern_preset(data_seed),
            other => {
                return Err(at(
                    "task",
                    "preset",
                    format!("unknown preset {other:?} (expected blobs, shapes or pattern)"),
                ))
            }
        };
        if let Some(n) = self.task.noise {
            spec.noise = n;
        }
        for (key, value, slot) in [
            ("train", self.task.train, &mut spec.counts.train),
            ("val", self.task.val, &mut spec.counts.val),
            ("test", self.task.test, &mut spec.counts.test),
        ] {
            if let Some(v) = value {
                if v == 0 {
                    return Err(at("task", key, "sample count must be positive".into()));
                }
                *slot = v;
            }
        }
        spec.validate().map_err(|e| at("task", "noise", e.to_string()))?;
        let arch = spec.reference_arch();
        let kind = spec.kind();

        let mut baseline = TrainConfig::baseline_for(kind, seed);
        apply_train(&mut baseline, &self.baseline, "baseline", &at)?;
        if self.baseline.cold_start_epochs.unwrap_or(0) != 0 {
            return Err(at("baseline", "cold_start_epochs", "baseline training has no cold start".into()));
        }

        let retrain = match pipeline {
            Pipeline::Baseline => None,
            Pipeline::Retrain | Pipeline::Nas => {
                let variant = self.trp.variant.as_deref().unwrap_or(match pipeline {
                    Pipeline::Nas => "nas",
                    _ => "hpo",
                });
                let mut cfg = match variant {
                    "hpo" => TrainConfig::hpo(kind.name(), arch.width(), arch.classes, seed)?,
                    "nas" => TrainConfig::nas(kind.name(), arch.width(), arch.classes, seed)?,
                    other => return Err(at("trp", "variant", format!("unknown variant {other:?} (expected hpo or nas)"))),
                };
                let trp = match variant {
                    "hpo" => {
                        if self.trp.blocks.is_some() {
                            return Err(at("trp", "blocks", "only the nas variant has blocks".into()));
                        }
                        let rates = self.trp.rates.clone().unwrap_or_else(|| {
                            vec![0.2; self.trp.depth.unwrap_or(3)]
                        });
                        if self.trp.depth.is_some_and(|d| d != rates.len()) {
                            return Err(at("trp", "depth", "depth disagrees with the number of rates".into()));
                        }
                        TrpConfig::hpo(rates, arch.width(), arch.classes).map_err(|e| at("trp", "rates", e.to_string()))?
                    }
                    _ => {
                        if self.trp.rates.is_some() {
                            return Err(at("trp", "rates", "only the hpo variant has dropout rates".into()));
                        }
                        TrpConfig::nas(
                            self.trp.depth.unwrap_or(3),
                            self.trp.blocks.unwrap_or(1),
                            arch.width(),
                            arch.classes,
                        )
                        .map_err(|e| at("trp", "depth", e.to_string()))?
                    }
                };
                cfg.lambdas = self
                    .trp
                    .lambdas
                    .clone()
                    .unwrap_or_else(|| crate::trajectory::ReturnWeights::halving(0.4, trp.depth).lambdas().to_vec());
                cfg.trp = Some(trp);
                apply_train(&mut cfg, &self.retrain, "retrain", &at)?;
                Some(cfg)
            }
        };

        let echo = RunConfig::echo_of(&spec, preset, &baseline, retrain.as_ref(), seed, self.run.baseline.clone());
        Ok(RunPlan {
            seed,
            spec,
            baseline,
            retrain,
            baseline_checkpoint: self.run.baseline.clone(),
            echo,
        })
    }

    /// A configuration with every value spelled out.
    fn echo_of(
        spec: &TaskSpec,
        preset: &str,
        baseline: &TrainConfig,
        retrain: Option<&TrainConfig>,
        seed: u64,
        baseline_checkpoint: Option<PathBuf>,
    ) -> String {
        let section = |c: &TrainConfig| {
            let (schedule, decay_factor, decay_every) = match c.schedule {
                LrSchedule::Constant { .. } => ("constant", None, None),
                LrSchedule::StepDecay { factor, every, .. } => ("step", Some(factor), Some(every)),
            };
            TrainSection {
                epochs: Some(c.epochs),
                cold_start_epochs: Some(c.cold_start_epochs),
                lr: Some(c.schedule.base()),
                schedule: Some(schedule.into()),
                decay_factor,
                decay_every,
                optimizer: Some(c.optimizer.name().into()),
                batch_size: Some(c.batch_size),
                weight_decay: Some(c.hyper.weight_decay),
                return_form: Some(
                    match c.return_form {
                        ReturnForm::Weighted => "weighted",
                        ReturnForm::Unweighted => "unweighted",
                    }
                    .into(),
                ),
            }
        };
        let mut baseline_section = section(baseline);
        baseline_section.cold_start_epochs = None;
        baseline_section.return_form = None;
        let trp = retrain.and_then(|c| c.trp.as_ref()).map(|t| match &t.variant {
            crate::trp::TrpVariant::HpoDropout { rates } => TrpSection {
                variant: Some("hpo".into()),
                rates: Some(rates.clone()),
                depth: None,
                blocks: None,
                lambdas: retrain.map(|c| c.lambdas.clone()),
            },
            crate::trp::TrpVariant::NasDepth { blocks } => TrpSection {
                variant: Some("nas".into()),
                rates: None,
                depth: Some(t.depth),
                blocks: Some(*blocks),
                lambdas: retrain.map(|c| c.lambdas.clone()),
            },
        });
        let counts = &spec.counts;
        let cfg = RunConfig {
            task: TaskSection {
                preset: Some(preset.into()),
                data_seed: Some(spec.seed),
                noise: Some(spec.noise),
                train: Some(counts.train),
                val: Some(counts.val),
                test: Some(counts.test),
            },
            baseline: baseline_section,
            retrain: retrain.map(section).unwrap_or_default(),
            trp: trp.unwrap_or_default(),
            run: RunSection {
                seeds: Some(vec![seed]),
                baseline: baseline_checkpoint,
            },
        };
        cfg.to_text()
    }
}

fn apply_train(
    cfg: &mut TrainConfig,
    section: &TrainSection,
    name: &str,
    at: &dyn Fn(&str, &str, String) -> SpgError,
) -> Result<()> {
    if let Some(e) = section.epochs {
        cfg.epochs = e;
    }
    if let Some(c) = section.cold_start_epochs {
        cfg.cold_start_epochs = c;
    }
    if let Some(b) = section.batch_size {
        if b == 0 {
            return Err(at(name, "batch_size", "must be positive".into()));
        }
        cfg.batch_size = b;
    }
    if let Some(o) = &section.optimizer {
        cfg.optimizer = o
            .parse::<OptimizerKind>()
            .map_err(|_| at(name, "optimizer", format!("unknown optimizer {o:?} (expected adamw or sgd)")))?;
    }
    if let Some(w) = section.weight_decay {
        cfg.hyper.weight_decay = w;
    }
    if let Some(f) = &section.return_form {
        cfg.return_form = match f.as_str() {
            "weighted" => ReturnForm::Weighted,
            "unweighted" => ReturnForm::Unweighted,
            other => return Err(at(name, "return_form", format!("unknown return form {other:?}"))),
        };
    }
    let lr = section.lr.unwrap_or(cfg.schedule.base());
    let (cur_factor, cur_every) = match cfg.schedule {
        LrSchedule::StepDecay { factor, every, .. } => (factor, every),
        LrSchedule::Constant { .. } => (0.5, 2),
    };
    let kind = section.schedule.as_deref().unwrap_or(match cfg.schedule {
        LrSchedule::Constant { .. } if section.decay_factor.is_none() && section.decay_every.is_none() => "constant",
        _ => "step",
    });
    cfg.schedule = match kind {
        "constant" => {
            if section.decay_factor.is_some() || section.decay_every.is_some() {
                return Err(at(name, "schedule", "decay settings need schedule = \"step\"".into()));
            }
            LrSchedule::Constant { lr }
        }
        "step" => LrSchedule::StepDecay {
            lr,
            factor: section.decay_factor.unwrap_or(cur_factor),
            every: section.decay_every.unwrap_or(cur_every),
        },
        other => return Err(at(name, "schedule", format!("unknown schedule {other:?} (expected constant or step)"))),
    };
    cfg.hyper.lr = lr;
    cfg.validate().map_err(|e| {
        let key = if cfg.cold_start_epochs > cfg.epochs {
            "cold_start_epochs"
        } else if e.to_string().contains("return weights") {
            "return_form"
        } else {
            "lr"
        };
        at(name, key, e.to_string())
    })
}

impl RunPlan {
    pub fn task_label(&self) -> &'static str {
        match self.spec.geometry {
            Geometry::Blobs { .. } => "blobs",
            Geometry::Shapes { .. } => "shapes",
            Geometry::Pattern { .. } => "pattern",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        let plan = cfg.plan(Pipeline::Retrain, 4, "").unwrap();
        assert_eq!(plan.spec, TaskSpec::blobs_preset(4));
        assert_eq!(plan.retrain.as_ref().unwrap().cold_start_epochs, 3);
        assert_eq!(cfg.seeds(None), vec![0]);
        assert_eq!(cfg.seeds(Some(9)), vec![9]);
    }

    #[test]
    fn syntax_error_reports_line() {
        let text = "[task]\npreset = \"blobs\"\nnoise = = 2\n";
        match RunConfig::parse(text) {
            Err(SpgError::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_line_and_name() {
        let text = "[retrain]\nepochs = 4\nlearning_rate = 0.1\n";
        match RunConfig::parse(text) {
            Err(SpgError::Config { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("learning_rate"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_error_points_at_key() {
        let text = "[task]\npreset = \"blobs\"\n\n[retrain]\nepochs = 2\ncold_start_epochs = 5\n";
        let cfg = RunConfig::parse(text).unwrap();
        match cfg.plan(Pipeline::Retrain, 0, text) {
            Err(SpgError::Config { line, message }) => {
                assert_eq!(line, 6);
                assert!(message.contains("retrain.cold_start_epochs"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = "[task]\npreset = \"cifar\"\n";
        let err = RunConfig::parse(text).unwrap().plan(Pipeline::Baseline, 0, text).unwrap_err();
        assert!(matches!(err, SpgError::Config { line: 2, .. }));
    }

    #[test]
    fn echo_reproduces_plan() {
        let text = "[task]\npreset = \"pattern\"\nnoise = 0.05\n[trp]\nvariant = \"nas\"\ndepth = 2\n[retrain]\nlr = 0.001\n";
        let cfg = RunConfig::parse(text).unwrap();
        let plan = cfg.plan(Pipeline::Retrain, 3, text).unwrap();
        let again = RunConfig::parse(&plan.echo).unwrap().plan(Pipeline::Retrain, 3, &plan.echo).unwrap();
        assert_eq!(again.spec, plan.spec);
        assert_eq!(again.baseline, plan.baseline);
        assert_eq!(again.retrain, plan.retrain);
        assert_eq!(again.echo, plan.echo);
        let r = plan.retrain.unwrap();
        assert_eq!(r.schedule, LrSchedule::StepDecay { lr: 1e-3, factor: 0.5, every: 2 });
        assert_eq!(r.lambdas, vec![0.4, 0.2]);
    }

    #[test]
    fn variant_specific_keys() {
        let text = "[trp]\nvariant = \"hpo\"\nblocks = 2\n";
        assert!(RunConfig::parse(text).unwrap().plan(Pipeline::Retrain, 0, text).is_err());
        let text = "[trp]\nrates = [0.1, 0.3]\n";
        let plan = RunConfig::parse(text).unwrap().plan(Pipeline::Retrain, 0, text).unwrap();
        assert_eq!(plan.retrain.unwrap().trp.unwrap().depth, 2);
    }
}
