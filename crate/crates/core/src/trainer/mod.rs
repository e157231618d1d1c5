//! Mini-batch Adam training in four modes, evaluation and checkpoints.
//!
//! Each mini-batch is processed in parallel, one sample per task. Per-sample
//! gradients are collected in batch order and summed sequentially, so the
//! result does not depend on the number of threads.

mod adam;
mod checkpoint;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    load_checkpoint, read_checkpoint_from, read_tensors, save_checkpoint, write_checkpoint_to,
    write_tensors, Checkpoint, TrainingState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::dataio::{Corpus, EegSample};
use crate::error::{Error, Result};
use crate::losses::{
    combined_l2_loss, combined_loss, cross_entropy, distillation_loss, LossReport, TeacherTarget,
    WeightInterpretation,
};
use crate::numerics::argmax;
use crate::recurrent::LstmStack;
use crate::rng;
use crate::teacher::PosteriorTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// `w(T) * KL + 0.5 * CE`
    SupervisedKd,
    /// KL to the softened teacher posterior only; labels are never read.
    UnsupervisedKd,
    /// Cross-entropy on labels only; posteriors are never read.
    HardOnly,
    /// `w(T) * ||softmax - posterior||^2 + 0.5 * CE`
    L2Kd,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SupervisedKd, Mode::UnsupervisedKd, Mode::HardOnly, Mode::L2Kd];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SupervisedKd => "supervised_kd",
            Mode::UnsupervisedKd => "unsupervised_kd",
            Mode::HardOnly => "hard_only",
            Mode::L2Kd => "l2_kd",
        }
    }

    pub fn uses_posteriors(self) -> bool {
        self != Mode::HardOnly
    }

    pub fn uses_labels(self) -> bool {
        self != Mode::UnsupervisedKd
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Mode::SupervisedKd => 0,
            Mode::UnsupervisedKd => 1,
            Mode::HardOnly => 2,
            Mode::L2Kd => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// Accepts the full names and the short forms `supervised`,
    /// `unsupervised`, `hard` and `l2`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" | "supervised_kd" => Ok(Mode::SupervisedKd),
            "unsupervised" | "unsupervised_kd" => Ok(Mode::UnsupervisedKd),
            "hard" | "hard_only" => Ok(Mode::HardOnly),
            "l2" | "l2_kd" => Ok(Mode::L2Kd),
            other => Err(Error::domain(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    pub weight_interpretation: WeightInterpretation,
}

impl TrainConfig {
    /// Adam with lr 0.001, betas (0.9, 0.999), eps 1e-8, batch 32, T = 5.
    pub fn new(mode: Mode, epochs: usize) -> Self {
        Self {
            mode,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs,
            temperature: 5.0,
            seed: 0,
            weight_interpretation: WeightInterpretation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be at least 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::domain(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::domain(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::domain(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::domain(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_accuracy: Option<f64>,
    pub wall_clock: Duration,
}

/// One record per completed epoch, plus counts of how many hard labels and
/// teacher posteriors the training loop consumed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub label_reads: u64,
    pub posterior_reads: u64,
}

impl TrainLog {
    /// Bitwise equality of everything except wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.label_reads == other.label_reads
            && self.posterior_reads == other.posterior_reads
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.mean_loss.to_bits() == b.mean_loss.to_bits()
                    && a.test_accuracy.map(f64::to_bits) == b.test_accuracy.map(f64::to_bits)
            })
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }
}

/// Builds training targets while counting what it reads.
struct TargetSource<'a> {
    mode: Mode,
    num_classes: usize,
    posteriors: Option<&'a PosteriorTable>,
    label_reads: u64,
    posterior_reads: u64,
}

impl TargetSource<'_> {
    fn label(&mut self, s: &EegSample) -> Result<usize> {
        self.label_reads += 1;
        if s.class_id >= self.num_classes {
            return Err(Error::Data(format!(
                "image {} has class {} but the stack has {} outputs",
                s.image_id, s.class_id, self.num_classes
            )));
        }
        Ok(s.class_id)
    }

    fn posterior(&mut self, s: &EegSample) -> Result<Vec<f64>> {
        let table = self
            .posteriors
            .ok_or_else(|| Error::Data(format!("mode {} needs teacher posteriors", self.mode)))?;
        let p = table
            .get(s.image_id)
            .ok_or_else(|| Error::Data(format!("no teacher posterior for image {}", s.image_id)))?;
        self.posterior_reads += 1;
        Ok(p.to_vec())
    }

    fn target(&mut self, s: &EegSample) -> Result<TeacherTarget> {
        let posterior = if self.mode.uses_posteriors() {
            self.posterior(s)?
        } else {
            Vec::new()
        };
        let hard_label = if self.mode.uses_labels() {
            Some(self.label(s)?)
        } else {
            None
        };
        Ok(TeacherTarget { posterior, hard_label })
    }
}

fn mode_loss(cfg: &TrainConfig, target: &TeacherTarget, logits: &[f64]) -> Result<LossReport> {
    let (t, w) = (cfg.temperature, cfg.weight_interpretation);
    match cfg.mode {
        Mode::SupervisedKd => combined_loss(target, logits, t, w),
        Mode::UnsupervisedKd => distillation_loss(target, logits, t),
        Mode::HardOnly => cross_entropy(target.hard_label.expect("label mode"), logits),
        Mode::L2Kd => combined_l2_loss(target, logits, t, w),
    }
}

/// Resumable training loop.
#[derive(Debug, Clone)]
pub struct Trainer {
    stack: LstmStack,
    config: TrainConfig,
    adam: AdamState,
    epochs_done: usize,
    log: TrainLog,
}

impl Trainer {
    pub fn new(stack: LstmStack, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&stack.params);
        Ok(Self {
            stack,
            config,
            adam,
            epochs_done: 0,
            log: TrainLog::default(),
        })
    }

    /// Continues from a checkpoint saved with training state. The log starts
    /// empty.
    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        let state = checkpoint
            .training
            .ok_or_else(|| Error::State("checkpoint has no optimizer state to resume from".into()))?;
        state.config.validate()?;
        state.adam.check(&checkpoint.stack.params)?;
        Ok(Self {
            stack: checkpoint.stack,
            config: state.config,
            adam: state.adam,
            epochs_done: state.epochs_done,
            log: TrainLog::default(),
        })
    }

    pub fn stack(&self) -> &LstmStack {
        &self.stack
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn into_parts(self) -> (LstmStack, TrainLog) {
        (self.stack, self.log)
    }

    pub fn training_state(&self) -> TrainingState {
        TrainingState {
            config: self.config,
            adam: self.adam.clone(),
            epochs_done: self.epochs_done,
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        save_checkpoint(&self.stack, Some(&self.training_state()), path)
    }

    fn check_inputs(&self, train: &Corpus, posteriors: Option<&PosteriorTable>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::domain("training corpus is empty"));
        }
        let sc = self.stack.config();
        if let Some(c) = train.channels() {
            if c != sc.input_channels {
                return Err(Error::shape(format!(
                    "corpus has {c} channels, stack expects {}",
                    sc.input_channels
                )));
            }
        }
        if self.config.mode.uses_posteriors() {
            let table = posteriors.ok_or_else(|| {
                Error::Data(format!("mode {} needs teacher posteriors", self.config.mode))
            })?;
            if table.num_classes() != sc.num_classes {
                return Err(Error::Data(format!(
                    "teacher posteriors have {} classes, stack has {}",
                    table.num_classes(),
                    sc.num_classes
                )));
            }
            if let Some(missing) = train.image_ids().into_iter().find(|id| table.get(*id).is_none()) {
                return Err(Error::Data(format!("no teacher posterior for training image {missing}")));
            }
        }
        Ok(())
    }

    /// Runs one epoch and appends its record to the log.
    pub fn run_epoch(
        &mut self,
        train: &Corpus,
        posteriors: Option<&PosteriorTable>,
        test: Option<&Corpus>,
    ) -> Result<&EpochRecord> {
        self.check_inputs(train, posteriors)?;
        let started = Instant::now();
        let epoch = self.epochs_done;
        let cfg = self.config;
        let samples = train.samples();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", &[epoch as u64]));

        let mut source = TargetSource {
            mode: cfg.mode,
            num_classes: self.stack.config().num_classes,
            posteriors,
            label_reads: 0,
            posterior_reads: 0,
        };
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let targets = batch
                .iter()
                .map(|&i| source.target(&samples[i]))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let stack = &self.stack;
            let per_sample: Vec<_> = batch
                .par_iter()
                .zip(targets.par_iter())
                .map(|(&i, target)| {
                    let s = &samples[i];
                    let dropout_seed = rng::derive_seed(
                        cfg.seed,
                        "dropout",
                        &[epoch as u64, u64::from(s.image_id), u64::from(s.subject_id)],
                    );
                    let out = stack.forward(&s.signal, true, dropout_seed)?;
                    let loss = mode_loss(&cfg, target, &out.logits)?;
                    let g: Vec<f64> = loss.grad_logits.iter().map(|v| v * scale).collect();
                    Ok((loss.value, stack.backward(&out, &g)?))
                })
                .collect::<Result<_>>()?;
            let mut total = self.stack.params.zeros_like();
            for (value, grads) in &per_sample {
                loss_sum += value;
                total.axpy(1.0, grads)?;
            }
            adam_step(&mut self.stack.params, &total, &mut self.adam, &cfg)?;
        }

        let mean_loss = loss_sum / samples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch} produced a non-finite loss")));
        }
        let test_accuracy = test.map(|t| evaluate(t, &self.stack)).transpose()?;
        self.epochs_done += 1;
        self.log.label_reads += source.label_reads;
        self.log.posterior_reads += source.posterior_reads;
        self.log.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            test_accuracy,
            wall_clock: started.elapsed(),
        });
        Ok(self.log.epochs.last().expect("just pushed"))
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn run(
        &mut self,
        train: &Corpus,
        posteriors: Option<&PosteriorTable>,
        test: Option<&Corpus>,
    ) -> Result<()> {
        while self.epochs_done < self.config.epochs {
            self.run_epoch(train, posteriors, test)?;
        }
        Ok(())
    }
}

/// Trains `stack` for `cfg.epochs` epochs. When `test` is given its accuracy
/// is recorded after each epoch.
pub fn fit(
    train: &Corpus,
    posteriors: Option<&PosteriorTable>,
    stack: LstmStack,
    cfg: &TrainConfig,
    test: Option<&Corpus>,
) -> Result<(LstmStack, TrainLog)> {
    let mut trainer = Trainer::new(stack, *cfg)?;
    trainer.run(train, posteriors, test)?;
    Ok(trainer.into_parts())
}

/// Predicted class of one signal, dropout off.
pub fn predict(stack: &LstmStack, sample: &EegSample) -> Result<usize> {
    let (logits, _) = stack.infer(&sample.signal)?;
    Ok(argmax(&logits))
}

/// Fraction of samples whose arg-max logit equals the class label.
pub fn evaluate(corpus: &Corpus, stack: &LstmStack) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty corpus"));
    }
    let hits = corpus
        .samples()
        .par_iter()
        .map(|s| Ok(usize::from(predict(stack, s)? == s.class_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / corpus.len() as f64)
}
