//! Training loops: plain cross-entropy for baselines and the masked
//! surrogate objective for networks carrying a replica chain.

mod checkpoint;
mod loss;
mod metrics;

pub use checkpoint::{Checkpoint, Progress, RngState, FORMAT_VERSION, MAGIC};
pub use loss::{cross_entropy, surrogate_loss};
pub use metrics::{MetricRecord, Phase, RunMetrics, METRICS_SCHEMA};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{streams, Mode, OptimizerHyper, OptimizerKind, OptimizerState, RngStream, Tape, Var};
use crate::error::{Result, SpgError};
use crate::tasks::{Batch, Dataset, Split, TaskData, TaskKind};
use crate::trajectory::{argmax, EpisodeBatch, ReturnForm, ReturnWeights};
use crate::trp::{ChainOutput, SpgModel, TrpConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr * factor^(epoch / every)`
    StepDecay { lr: f64, factor: f64, every: usize },
}

impl LrSchedule {
    pub fn base(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } | LrSchedule::StepDecay { lr, .. } => lr,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay { lr, factor, every } => {
                lr * factor.powi(i32::try_from(epoch / every).unwrap_or(i32::MAX))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.base();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(SpgError::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        if let LrSchedule::StepDecay { factor, every, .. } = *self {
            if every == 0 || !(factor.is_finite() && factor > 0.0) {
                return Err(SpgError::invalid("step decay needs a positive factor and interval"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: String,
    pub seed: u64,
    /// total epochs, cold-start epochs included
    pub epochs: usize,
    pub cold_start_epochs: usize,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub hyper: OptimizerHyper,
    /// samples per update
    pub batch_size: usize,
    pub trp: Option<TrpConfig>,
    /// `λ_1..λ_T`
    pub lambdas: Vec<f64>,
    pub return_form: ReturnForm,
}

impl TrainConfig {
    /// Cross-entropy fine-tuning with AdamW.
    pub fn baseline(task: &str, seed: u64) -> Self {
        TrainConfig {
            task: task.to_string(),
            seed,
            epochs: 12,
            cold_start_epochs: 0,
            schedule: LrSchedule::Constant { lr: 1e-3 },
            optimizer: OptimizerKind::AdamW,
            hyper: OptimizerHyper::default(),
            batch_size: 32,
            trp: None,
            lambdas: Vec::new(),
            return_form: ReturnForm::Weighted,
        }
    }

    /// Baseline defaults tuned per task: segmentation batches hold four
    /// images (1024 pixels) and train longer at a higher rate.
    pub fn baseline_for(kind: TaskKind, seed: u64) -> Self {
        let base = TrainConfig::baseline(kind.name(), seed);
        match kind {
            TaskKind::Segmentation => TrainConfig {
                epochs: 30,
                batch_size: 4,
                schedule: LrSchedule::Constant { lr: 3e-3 },
                ..base
            },
            TaskKind::LanguageModeling => TrainConfig {
                epochs: 20,
                schedule: LrSchedule::Constant { lr: 3e-3 },
                ..base
            },
            TaskKind::Classification => base,
        }
    }

    /// Shared retraining fields: batch size follows the task's baseline.
    fn retrain_base(task: &str, seed: u64) -> Self {
        let base = TrainConfig::baseline(task, seed);
        match task.parse::<TaskKind>() {
            Ok(kind) => TrainConfig {
                batch_size: TrainConfig::baseline_for(kind, seed).batch_size,
                ..base
            },
            Err(_) => base,
        }
    }

    /// Dropout chain with rates 0.2, weights (0.4, 0.2, 0.1), three
    /// cold-start epochs and a constant rate.
    pub fn hpo(task: &str, width: usize, classes: usize, seed: u64) -> Result<Self> {
        Ok(TrainConfig {
            epochs: 13,
            cold_start_epochs: 3,
            schedule: LrSchedule::Constant { lr: 4e-4 },
            trp: Some(TrpConfig::hpo(vec![0.2; 3], width, classes)?),
            lambdas: ReturnWeights::standard().lambdas().to_vec(),
            ..TrainConfig::retrain_base(task, seed)
        })
    }

    /// Depth chain of three single-block modules; rate 4e-4 halved every two
    /// epochs, one cold-start epoch, ten epochs in total.
    pub fn nas(task: &str, width: usize, classes: usize, seed: u64) -> Result<Self> {
        Ok(TrainConfig {
            epochs: 10,
            cold_start_epochs: 1,
            schedule: LrSchedule::StepDecay {
                lr: 4e-4,
                factor: 0.5,
                every: 2,
            },
            trp: Some(TrpConfig::nas(3, 1, width, classes)?),
            lambdas: ReturnWeights::standard().lambdas().to_vec(),
            ..TrainConfig::retrain_base(task, seed)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.cold_start_epochs > self.epochs {
            return Err(SpgError::invalid(format!(
                "cold start ({}) exceeds total epochs ({})",
                self.cold_start_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(SpgError::invalid("batch size must be positive"));
        }
        ReturnWeights::new(self.lambdas.clone())?;
        if let Some(trp) = &self.trp {
            trp.validate()?;
            if self.return_form == ReturnForm::Weighted && self.lambdas.len() < trp.depth {
                return Err(SpgError::invalid(format!(
                    "{} return weights given for {} replica depths",
                    self.lambdas.len(),
                    trp.depth
                )));
            }
        }
        Ok(())
    }

    /// Cold start only makes sense for an optimizer with moment estimates.
    pub fn effective_cold_start(&self) -> usize {
        if self.optimizer.is_adaptive() {
            self.cold_start_epochs
        } else {
            0
        }
    }

    /// `w_0..w_T`.
    pub fn depth_weights(&self) -> Vec<f64> {
        let depth = self.trp.as_ref().map_or(0, |t| t.depth);
        std::iter::once(1.0)
            .chain((0..depth).map(|t| match self.return_form {
                ReturnForm::Weighted => self.lambdas[t],
                ReturnForm::Unweighted => 1.0,
            }))
            .collect()
    }

    fn return_weights(&self) -> Option<ReturnWeights> {
        match self.return_form {
            ReturnForm::Weighted => ReturnWeights::new(self.lambdas.clone()).ok(),
            ReturnForm::Unweighted => None,
        }
    }
}

/// The training loss of one forward pass: cross-entropy of `π_0` without a
/// chain, otherwise the surrogate summed over streams. Episode counts are
/// accumulated into `stats`.
pub fn objective(
    tape: &mut Tape,
    outs: &[ChainOutput],
    targets: &[usize],
    classes: usize,
    config: &TrainConfig,
    stats: &mut StepStats,
) -> Result<Var> {
    if config.trp.is_none() {
        let pi0: Vec<_> = outs.iter().map(|o| o.logits[0]).collect();
        return cross_entropy(tape, &pi0, targets);
    }
    let m = targets.len() * outs.len();
    let weights = config.depth_weights();
    let rw = config.return_weights();
    let mut total = None;
    for o in outs {
        let values: Vec<&[f64]> = o.logits.iter().map(|&v| tape.value(v).data()).collect();
        let ep = EpisodeBatch::from_logits(&values, classes, targets, rw.as_ref())?;
        let depth_units: Vec<usize> = (0..=ep.depth)
            .map(|t| ep.masks.at(t).iter().filter(|&&b| b).count())
            .collect();
        if stats.survivors.is_empty() {
            stats.survivors = vec![0; depth_units.len()];
        }
        for (s, d) in stats.survivors.iter_mut().zip(&depth_units) {
            *s += d;
        }
        stats.episode_units += ep.units();
        stats.step_length_sum += ep.step_lengths.iter().sum::<usize>();
        let term = surrogate_loss(tape, &o.logits, targets, &ep.masks, &weights, m, &ep.step_lengths)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| SpgError::invalid("model has no output streams"))
}

/// Counts gathered over one update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// units of the main stream
    pub units: usize,
    /// correct `π_0` predictions on the main stream
    pub correct: usize,
    /// units with `M_t = 1` per depth, over all streams
    pub survivors: Vec<usize>,
    /// units over all streams
    pub episode_units: usize,
    pub step_length_sum: usize,
}

pub struct Trainer {
    model: SpgModel,
    optimizer: OptimizerState,
    config: TrainConfig,
    dropout: RngStream,
    progress: Progress,
}

impl Trainer {
    /// `model` must already carry the chain named in `config`.
    pub fn new(model: SpgModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.trp() != config.trp.as_ref() {
            return Err(SpgError::invalid("network chain does not match the training configuration"));
        }
        let hyper = OptimizerHyper {
            lr: config.schedule.base(),
            ..config.hyper
        };
        let optimizer = OptimizerState::new(config.optimizer, hyper, model.store());
        let progress = Progress {
            epoch: config.cold_start_epochs - config.effective_cold_start(),
            ..Progress::default()
        };
        Ok(Trainer {
            model,
            optimizer,
            dropout: RngStream::new(config.seed, streams::DROPOUT),
            config,
            progress,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = ckpt.model()?;
        let mut trainer = Trainer::new(model, config)?;
        trainer.optimizer = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| SpgError::Format("checkpoint has no optimizer state".into()))?;
        trainer.dropout = ckpt
            .rng
            .ok_or_else(|| SpgError::Format("checkpoint has no random stream state".into()))?
            .reopen();
        trainer.progress = ckpt
            .progress
            .ok_or_else(|| SpgError::Format("checkpoint has no progress record".into()))?;
        Ok(trainer)
    }

    pub fn checkpoint(&self, config_echo: &str) -> Checkpoint {
        Checkpoint {
            optimizer: Some(self.optimizer.clone()),
            rng: Some(RngState::of(&self.dropout)),
            progress: Some(self.progress),
            config_echo: config_echo.to_string(),
            ..Checkpoint::from_model(&self.model)
        }
    }

    pub fn model(&self) -> &SpgModel {
        &self.model
    }

    pub fn into_model(self) -> SpgModel {
        self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn is_done(&self) -> bool {
        self.progress.epoch >= self.config.epochs
    }

    pub fn phase_for_epoch(&self, epoch: usize) -> Phase {
        if epoch < self.config.cold_start_epochs {
            Phase::ColdStart
        } else if self.config.trp.is_some() {
            Phase::Spg
        } else {
            Phase::Baseline
        }
    }

    /// Zero during cold start, then the schedule counted from its end.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.config.cold_start_epochs {
            0.0
        } else {
            self.config.schedule.lr_at(epoch - self.config.cold_start_epochs)
        }
    }

    /// Sample order of an epoch; depends only on the seed and epoch index.
    pub fn epoch_order(&self, epoch: usize, samples: usize) -> Vec<usize> {
        let stream = streams::SHUFFLE | ((epoch as u64 + 1) << 16);
        RngStream::new(self.config.seed, stream).permutation(samples)
    }

    /// One forward/backward/update on `batch` at learning rate `lr`.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats> {
        let mut tape = Tape::new();
        let outs = self.model.forward(&mut tape, &batch.input, &mut self.dropout, Mode::Train)?;
        let targets = &batch.targets;
        let classes = self.model.arch().classes;
        let main = tape.value(outs[0].logits[0]).data();
        let correct = targets
            .iter()
            .enumerate()
            .filter(|&(i, &c)| argmax(&main[i * classes..(i + 1) * classes]) == c)
            .count();
        let mut stats = StepStats {
            units: targets.len(),
            correct,
            ..StepStats::default()
        };

        let loss = objective(&mut tape, &outs, targets, classes, &self.config, &mut stats)?;
        stats.loss = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        grads.write_to(&tape, self.model.store_mut());
        self.optimizer.step(self.model.store_mut(), Some(lr))?;
        self.progress.steps += 1;
        Ok(stats)
    }

    fn batches_per_epoch(&self, data: &Dataset) -> usize {
        data.samples.div_ceil(self.config.batch_size)
    }

    fn next_batch(&self, data: &Dataset) -> Result<Batch> {
        let order = self.epoch_order(self.progress.epoch, data.samples);
        let b = self.config.batch_size;
        let start = self.progress.batch * b;
        data.batch(&order[start..(start + b).min(data.samples)])
    }

    fn advance(&mut self, data: &Dataset) {
        self.progress.batch += 1;
        if self.progress.batch == self.batches_per_epoch(data) {
            self.progress.batch = 0;
            self.progress.epoch += 1;
        }
    }

    fn guarded_step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats> {
        self.step(batch, lr).map_err(|e| match e {
            SpgError::NonFinite { op } => SpgError::Divergence(format!(
                "non-finite {op} at epoch {} batch {}",
                self.progress.epoch, self.progress.batch
            )),
            other => other,
        })
    }

    /// Run `n` updates, crossing epoch boundaries as needed.
    pub fn train_steps(&mut self, data: &Dataset, n: usize) -> Result<()> {
        for _ in 0..n {
            let batch = self.next_batch(data)?;
            let lr = self.lr_for_epoch(self.progress.epoch);
            self.guarded_step(&batch, lr)?;
            self.advance(data);
        }
        Ok(())
    }

    /// Finish the current epoch and summarise it.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<MetricRecord> {
        let epoch = self.progress.epoch;
        let lr = self.lr_for_epoch(epoch);
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut units = 0usize;
        let mut correct = 0usize;
        let mut survivors: Vec<usize> = Vec::new();
        let mut episode_units = 0usize;
        let mut length_sum = 0usize;
        while self.progress.epoch == epoch {
            let batch = self.next_batch(data)?;
            let s = self.guarded_step(&batch, lr)?;
            loss_sum += s.loss * s.units as f64;
            units += s.units;
            correct += s.correct;
            if survivors.is_empty() {
                survivors = vec![0; s.survivors.len()];
            }
            for (a, b) in survivors.iter_mut().zip(&s.survivors) {
                *a += b;
            }
            episode_units += s.episode_units;
            length_sum += s.step_length_sum;
            self.advance(data);
        }
        let mut rec = MetricRecord::new(epoch, Split::Train.name(), self.phase_for_epoch(epoch));
        rec.lr = lr;
        rec.loss = loss_sum / units as f64;
        rec.accuracy = correct as f64 / units as f64;
        if episode_units > 0 {
            rec.survival = Some(survivors.iter().map(|&s| s as f64 / episode_units as f64).collect());
            rec.mean_step_length = Some(length_sum as f64 / episode_units as f64);
        }
        rec.seconds = started.elapsed().as_secs_f64();
        Ok(rec)
    }

    /// Run the zero-rate warm-up epochs that remain, if any.
    pub fn cold_start(&mut self, data: &TaskData, metrics: &mut RunMetrics) -> Result<()> {
        while self.progress.epoch < self.config.cold_start_epochs {
            self.epoch_with_validation(data, metrics)?;
        }
        Ok(())
    }

    /// Train to the configured number of epochs, recording a train and a
    /// validation record per epoch.
    pub fn fit(&mut self, data: &TaskData, metrics: &mut RunMetrics) -> Result<()> {
        while !self.is_done() {
            self.epoch_with_validation(data, metrics)?;
        }
        Ok(())
    }

    fn epoch_with_validation(&mut self, data: &TaskData, metrics: &mut RunMetrics) -> Result<()> {
        let rec = self.run_epoch(&data.train)?;
        let epoch = rec.epoch;
        let lr = rec.lr;
        let phase = rec.phase;
        metrics.push(rec);
        let started = Instant::now();
        let eval = evaluate(&self.model, &data.val)?;
        let mut val = eval.record(epoch, Split::Val, phase);
        val.lr = lr;
        if self.model.is_attached() {
            val.depth_accuracy = Some(evaluate_depths(&self.model, &data.val)?);
        }
        val.seconds = started.elapsed().as_secs_f64();
        metrics.push(val);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub units: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_iou: Option<f64>,
    pub class_iou: Option<Vec<f64>>,
    pub clean_accuracy: Option<f64>,
}

impl EvalMetrics {
    pub fn record(&self, epoch: usize, split: Split, phase: Phase) -> MetricRecord {
        let mut r = MetricRecord::new(epoch, split.name(), phase);
        r.loss = self.loss;
        r.accuracy = self.accuracy;
        r.mean_iou = self.mean_iou;
        r.class_iou = self.class_iou.clone();
        r.clean_accuracy = self.clean_accuracy;
        r
    }
}

const EVAL_BATCH: usize = 64;

pub fn accuracy(predictions: &[usize], targets: &[usize]) -> f64 {
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    hits as f64 / targets.len().max(1) as f64
}

/// Intersection over union per class; classes absent from both predictions
/// and targets are left out of the mean.
pub fn class_iou(predictions: &[usize], targets: &[usize], classes: usize) -> (Vec<f64>, f64) {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let per: Vec<f64> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { f64::NAN } else { i as f64 / u as f64 })
        .collect();
    let present: Vec<f64> = per.iter().copied().filter(|x| !x.is_nan()).collect();
    let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
    (per.into_iter().map(|x| if x.is_nan() { 0.0 } else { x }).collect(), mean)
}

fn row_log_softmax_at(row: &[f64], c: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[c] - lse
}

/// Eval-mode metrics of the main head's `π_0`, which is exactly what the
/// stripped network computes.
pub fn evaluate(model: &SpgModel, data: &Dataset) -> Result<EvalMetrics> {
    let classes = model.arch().classes;
    let mut preds = Vec::with_capacity(data.units());
    let mut nll = 0.0;
    for batch in data.sequential_batches(EVAL_BATCH)? {
        let logits = model.predict(&batch.input)?;
        for (row, &t) in logits.data().chunks(classes).zip(&batch.targets) {
            preds.push(argmax(row));
            nll -= row_log_softmax_at(row, t);
        }
    }
    let mut out = EvalMetrics {
        units: data.units(),
        loss: nll / data.units() as f64,
        accuracy: accuracy(&preds, &data.targets),
        mean_iou: None,
        class_iou: None,
        clean_accuracy: None,
    };
    if data.kind == TaskKind::Segmentation {
        let (per, mean) = class_iou(&preds, &data.targets, classes);
        out.class_iou = Some(per);
        out.mean_iou = Some(mean);
    }
    if let Some(clean) = &data.clean {
        let (mut n, mut hits) = (0usize, 0usize);
        for ((p, t), &c) in preds.iter().zip(&data.targets).zip(clean) {
            if c {
                n += 1;
                hits += usize::from(p == t);
            }
        }
        out.clean_accuracy = Some(hits as f64 / n.max(1) as f64);
    }
    Ok(out)
}

/// Eval-mode accuracy of the main head at every depth `π_0..π_T`.
pub fn evaluate_depths(model: &SpgModel, data: &Dataset) -> Result<Vec<f64>> {
    let classes = model.arch().classes;
    let depth = model.trp().map_or(0, |t| t.depth);
    let mut hits = vec![0usize; depth + 1];
    for batch in data.sequential_batches(EVAL_BATCH)? {
        let logits = model.logits(&batch.input)?;
        for (t, l) in logits[0].iter().enumerate() {
            for (row, &c) in l.data().chunks(classes).zip(&batch.targets) {
                hits[t] += usize::from(argmax(row) == c);
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / data.units() as f64).collect())
}

/// Evaluate a saved network on one split.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &TaskData, split: Split) -> Result<EvalMetrics> {
    evaluate(&ckpt.model()?, data.get(split))
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    /// network with its chain, optimizer and stream state
    pub spg: Checkpoint,
    pub stripped: Checkpoint,
    pub metrics: RunMetrics,
    pub baseline_test: EvalMetrics,
    pub stripped_test: EvalMetrics,
    /// validation accuracy of `π_0..π_T` right after attaching the chain
    pub attach_depth_accuracy: Vec<f64>,
}

/// Attach the configured chain to a baseline, warm the optimizer, train with
/// the surrogate objective, strip the chain and evaluate on the test split.
pub fn retrain(baseline: &Checkpoint, data: &TaskData, config: &TrainConfig, config_echo: &str) -> Result<RetrainOutcome> {
    let trp = config
        .trp
        .clone()
        .ok_or_else(|| SpgError::invalid("retraining needs a replica chain configuration"))?;
    let mut model = baseline.model()?;
    if model.is_attached() {
        return Err(SpgError::invalid("baseline checkpoint still carries a replica chain"));
    }
    let baseline_test = evaluate(&model, &data.test)?;
    model.attach(trp, config.seed)?;

    let mut metrics = RunMetrics::default();
    let entry = evaluate(&model, &data.val)?;
    let attach_depth_accuracy = evaluate_depths(&model, &data.val)?;
    let mut rec = entry.record(0, Split::Val, Phase::Entry);
    rec.depth_accuracy = Some(attach_depth_accuracy.clone());
    metrics.push(rec);

    let mut trainer = Trainer::new(model, config.clone())?;
    trainer.cold_start(data, &mut metrics)?;
    trainer.fit(data, &mut metrics)?;

    let spg = trainer.checkpoint(config_echo);
    let stripped_model = trainer.model().strip()?;
    let stripped_test = evaluate(&stripped_model, &data.test)?;
    metrics.push(stripped_test.record(config.epochs, Split::Test, Phase::Final));
    let stripped = Checkpoint {
        config_echo: config_echo.to_string(),
        ..Checkpoint::from_model(&stripped_model)
    };
    Ok(RetrainOutcome {
        spg,
        stripped,
        metrics,
        baseline_test,
        stripped_test,
        attach_depth_accuracy,
    })
}
