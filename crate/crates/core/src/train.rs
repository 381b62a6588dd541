//! Three-stage training.
//!
//! Stage 1 warms up encoder and model on the accurate subset. Stage 2 fits
//! the prompt bank against the frozen warm-up network. Stage 3 trains a
//! student on shuffled mixed batches while an EMA teacher, frozen within each
//! batch, drives the inner-loop calibration of the bank.
//!
//! Randomness is derived per stage and epoch from the run seed, so the state
//! needed to resume is parameters, optimizer moments, bank and counters.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ReferringSample;
use crate::error::{Error, Result};
use crate::lrb::{calibrate, sample_grad, BlobDtype, PromptBank, PromptGrad};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{LossConfig, Network, NetworkConfig};
use crate::params::ParamSet;
use crate::rng;
use crate::text::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 3e-5,
            weight_decay: 0.01,
            poly_power: 0.9,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    /// Learning rate for auxiliary trainable modules. The toy network has
    /// none, so this is validated and recorded but unused.
    pub aux_lr: f64,
    pub prompt_lr: f64,
    pub inner_steps: usize,
    pub batch_size: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 40,
            aux_lr: 1e-5,
            prompt_lr: 1e-6,
            inner_steps: 1,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmaRamp {
    /// `min(alpha_max, 1 - 1/(t+1))`.
    MeanTeacher,
    /// `alpha_max` from the first step.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3Config {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub prompt_lr: f64,
    pub inner_steps: usize,
    pub update_freq: usize,
    pub alpha_max: f64,
    pub ramp: EmaRamp,
    pub batch_size: usize,
    /// Stops stage 3 after this many batches when set.
    pub max_steps: Option<u64>,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 3e-5,
            weight_decay: 0.01,
            poly_power: 0.9,
            prompt_lr: 1e-6,
            inner_steps: 1,
            update_freq: 1,
            alpha_max: 0.9995,
            ramp: EmaRamp::MeanTeacher,
            batch_size: 8,
            max_steps: None,
        }
    }
}

impl Stage3Config {
    pub fn schedule(&self) -> EmaSchedule {
        EmaSchedule {
            alpha_max: self.alpha_max,
            ramp: self.ramp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub prompt_len: usize,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_len: 4,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("stage1.lr", self.stage1.lr),
            ("stage2.aux_lr", self.stage2.aux_lr),
            ("stage2.prompt_lr", self.stage2.prompt_lr),
            ("stage3.lr", self.stage3.lr),
            ("stage3.prompt_lr", self.stage3.prompt_lr),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, b) in [
            ("stage1.batch_size", self.stage1.batch_size),
            ("stage2.batch_size", self.stage2.batch_size),
            ("stage3.batch_size", self.stage3.batch_size),
            ("stage3.update_freq", self.stage3.update_freq),
            ("prompt_len", self.prompt_len),
        ] {
            if b == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.stage3.alpha_max > 0.0 && self.stage3.alpha_max <= 1.0) {
            return Err(Error::Config(format!(
                "stage3.alpha_max must lie in (0, 1], got {}",
                self.stage3.alpha_max
            )));
        }
        for (name, w) in [
            ("stage1.weight_decay", self.stage1.weight_decay),
            ("stage3.weight_decay", self.stage3.weight_decay),
            ("stage1.poly_power", self.stage1.poly_power),
            ("stage3.poly_power", self.stage3.poly_power),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Whether stage 3 uses the bank at all. With zero inner steps the bank
    /// would never change, so it is left out and stage 3 reduces to plain
    /// mixed training.
    pub fn uses_bank(&self) -> bool {
        self.stage3.inner_steps > 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub alpha_max: f64,
    pub ramp: EmaRamp,
}

pub fn ema_alpha(t: u64, schedule: &EmaSchedule) -> f64 {
    match schedule.ramp {
        EmaRamp::MeanTeacher => schedule.alpha_max.min(1.0 - 1.0 / (t as f64 + 1.0)),
        EmaRamp::Constant => schedule.alpha_max,
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    teacher.check_compatible(student)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

/// Polynomial decay `base * (1 - step/total)^power`.
pub fn poly_lr(base: f64, step: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * (1.0 - frac).powf(power)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        params.check_compatible(grads)?;
        params.check_compatible(&self.m)?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let entries = params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in entries {
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *p -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

/// Last completed (stage, epoch).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub student: Network,
    /// Present from the start of stage 3.
    pub teacher: Option<Network>,
    pub bank: Option<PromptBank>,
    pub optimizer: AdamW,
    /// Stage-3 batch counter.
    pub t: u64,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    progress: Progress,
    t: u64,
    adam_step: u64,
    weight_decay: f64,
    network: NetworkConfig,
    student_checksum: String,
    teacher_checksum: Option<String>,
    bank_checksum: Option<String>,
}

pub const STATE_FILE: &str = "state.json";

impl TrainerState {
    pub fn new(student: Network, weight_decay: f64) -> Self {
        let optimizer = AdamW::new(&student.params, weight_decay);
        Self {
            student,
            teacher: None,
            bank: None,
            optimizer,
            t: 0,
            progress: Progress {
                stage: Stage::Init,
                epoch: 0,
            },
        }
    }

    /// Writes the full state in 64-bit blobs so a resumed run is bit-identical.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dt = BlobDtype::F64;
        self.student.params.save(dir, "student", dt)?;
        if let Some(t) = &self.teacher {
            t.params.save(dir, "teacher", dt)?;
        }
        if let Some(b) = &self.bank {
            b.save(&dir.join("bank"), dt)?;
        }
        self.optimizer.m.save(dir, "adam_m", dt)?;
        self.optimizer.v.save(dir, "adam_v", dt)?;
        self.student.vocab.save(&dir.join("vocab.json"))?;
        let meta = StateFile {
            progress: self.progress,
            t: self.t,
            adam_step: self.optimizer.step,
            weight_decay: self.optimizer.weight_decay,
            network: self.student.config(),
            student_checksum: self.student.checksum(),
            teacher_checksum: self.teacher.as_ref().map(Network::checksum),
            bank_checksum: self.bank.as_ref().map(PromptBank::checksum),
        };
        let p = dir.join(STATE_FILE);
        fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(STATE_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: StateFile = serde_json::from_str(&text)?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let student = Network::from_params(vocab.clone(), &meta.network, ParamSet::load(dir, "student")?)?;
        let teacher = match &meta.teacher_checksum {
            Some(_) => Some(Network::from_params(vocab, &meta.network, ParamSet::load(dir, "teacher")?)?),
            None => None,
        };
        let bank = match &meta.bank_checksum {
            Some(_) => Some(PromptBank::load(&dir.join("bank"))?),
            None => None,
        };
        let m = ParamSet::load(dir, "adam_m")?;
        let v = ParamSet::load(dir, "adam_v")?;
        student.params.check_compatible(&m)?;
        student.params.check_compatible(&v)?;
        let mut optimizer = AdamW::new(&student.params, meta.weight_decay);
        optimizer.step = meta.adam_step;
        optimizer.m = m;
        optimizer.v = v;
        let state = Self {
            student,
            teacher,
            bank,
            optimizer,
            t: meta.t,
            progress: meta.progress,
        };
        let mismatch = state.student.checksum() != meta.student_checksum
            || state.teacher.as_ref().map(Network::checksum) != meta.teacher_checksum
            || state.bank.as_ref().map(PromptBank::checksum) != meta.bank_checksum;
        if mismatch {
            return Err(Error::ParamMismatch(format!("checksum mismatch in {}", dir.display())));
        }
        Ok(state)
    }
}

/// Training data for all stages. Weak samples carry their weak expression.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    pub accurate: Vec<ReferringSample>,
    pub weak: Vec<ReferringSample>,
    /// Accurate-expression validation samples; may be empty.
    pub val: Vec<ReferringSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_loss: Option<f64>,
    pub lr: f64,
    pub t: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_student: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_teacher: Option<MetricsReport>,
}

/// Checksums around one calibration call.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationEvent {
    pub stage: u8,
    pub frozen_before: String,
    pub frozen_after: String,
    /// Bank rows that the call was allowed to write.
    pub rows: Vec<usize>,
    pub bank_before: Vec<String>,
    pub bank_after: Vec<String>,
}

/// Trace of one stage-3 batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub t: u64,
    pub calibrated: bool,
    /// Teacher checksum entering step (a).
    pub teacher_at_calibration: String,
    /// Bank gradients produced by the student loss, one block per weak sample.
    pub prompt_grads: Vec<(usize, Vec<f64>)>,
    pub bank_before_student: Option<String>,
    pub bank_after_student: Option<String>,
    pub alpha: f64,
    pub student: ParamSet,
    pub teacher: ParamSet,
}

/// Hooks into the training loop. Traces are only assembled when
/// [`TrainObserver::wants_trace`] returns true.
pub trait TrainObserver {
    fn on_epoch(&mut self, _state: &TrainerState, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn wants_trace(&self) -> bool {
        false
    }

    fn on_calibration(&mut self, _event: &CalibrationEvent) {}

    fn on_step(&mut self, _trace: &StepTrace) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Collects epoch records in memory.
#[derive(Default)]
pub struct RecordLog {
    pub records: Vec<EpochRecord>,
}

impl TrainObserver for RecordLog {
    fn on_epoch(&mut self, _state: &TrainerState, record: &EpochRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub data: &'a TrainData,
    pub observer: &'a mut dyn TrainObserver,
}

fn shuffled(n: usize, seed: u64, stage: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag(stage), epoch as u64]));
    order
}

fn batches_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

fn row_checksums(bank: &PromptBank, rows: &[usize]) -> Vec<String> {
    rows.iter().map(|&j| bank.row_checksum(j)).collect()
}

impl Trainer<'_> {
    fn validate(&self, net: &Network) -> Result<Option<MetricsReport>> {
        if self.data.val.is_empty() {
            return Ok(None);
        }
        evaluate(net, &self.data.val, "val", self.loss.threshold).map(Some)
    }

    /// Stage 1 on the accurate subset, resuming after the last completed epoch.
    pub fn stage1(&mut self, state: &mut TrainerState) -> Result<()> {
        let cfg = &self.config.stage1;
        let samples = &self.data.accurate;
        if samples.is_empty() {
            return Err(Error::InvalidInput("stage 1 needs a nonempty accurate subset".into()));
        }
        let start = match state.progress.stage {
            Stage::Init => {
                state.optimizer = AdamW::new(&state.student.params, cfg.weight_decay);
                0
            }
            Stage::Stage1 => state.progress.epoch,
            _ => return Ok(()),
        };
        let tokens = samples
            .iter()
            .map(|s| state.student.tokenize(&s.expression))
            .collect::<Result<Vec<_>>>()?;
        let per_epoch = batches_per_epoch(samples.len(), cfg.batch_size);
        let total = per_epoch * cfg.epochs as u64;
        for epoch in start..cfg.epochs {
            let order = shuffled(samples.len(), self.config.seed, "stage1", epoch);
            let mut loss_sum = 0.0;
            let mut lr = cfg.lr;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let step = epoch as u64 * per_epoch + b as u64;
                let mut grads = state.student.params.zeros_like();
                let w = 1.0 / batch.len() as f64;
                for &i in batch {
                    let s = &samples[i];
                    let g = sample_grad(&state.student, &s.image, &s.mask, &tokens[i], None, w, Some(&mut grads), PromptGrad::Skip)?;
                    if !g.loss.is_finite() {
                        return Err(Error::Divergence {
                            stage: "stage1",
                            epoch: epoch + 1,
                            step: step as usize,
                            loss: g.loss,
                        });
                    }
                    loss_sum += g.loss;
                }
                lr = poly_lr(cfg.lr, step, total, cfg.poly_power);
                state.optimizer.update(&mut state.student.params, &grads, lr)?;
            }
            if !state.student.params.all_finite() {
                return Err(Error::Divergence {
                    stage: "stage1",
                    epoch: epoch + 1,
                    step: ((epoch as u64 + 1) * per_epoch) as usize,
                    loss: f64::NAN,
                });
            }
            state.progress = Progress {
                stage: Stage::Stage1,
                epoch: epoch + 1,
            };
            let record = EpochRecord {
                stage: 1,
                epoch: epoch + 1,
                train_loss: loss_sum / samples.len() as f64,
                weak_loss: None,
                lr,
                t: state.t,
                val_student: self.validate(&state.student)?,
                val_teacher: None,
            };
            tracing::info!(stage = 1, epoch = epoch + 1, loss = record.train_loss, "epoch done");
            self.observer.on_epoch(state, &record)?;
        }
        state.progress = Progress {
            stage: Stage::Stage1,
            epoch: cfg.epochs,
        };
        Ok(())
    }

    /// Stage 2: bank warm-up on the frozen stage-1 network.
    pub fn stage2(&mut self, state: &mut TrainerState) -> Result<()> {
        let cfg = &self.config.stage2;
        let weak = &self.data.weak;
        let start = match state.progress.stage {
            Stage::Init => return Err(Error::InvalidInput("stage 2 requires a completed stage 1".into())),
            Stage::Stage1 => {
                let mut r = rng::stream(self.config.seed, &[rng::tag("bank")]);
                state.bank = Some(PromptBank::for_weak_set(weak, &state.student, self.config.prompt_len, &mut r)?);
                0
            }
            Stage::Stage2 => state.progress.epoch,
            Stage::Stage3 => return Ok(()),
        };
        for epoch in start..cfg.epochs {
            let bank = state.bank.as_mut().expect("bank built before stage 2 epochs");
            let order = shuffled(weak.len(), self.config.seed, "stage2", epoch);
            let mut loss_sum = 0.0;
            let trace = self.observer.wants_trace();
            for batch in order.chunks(cfg.batch_size) {
                let members: Vec<&ReferringSample> = batch.iter().map(|&i| &weak[i]).collect();
                let rows = members
                    .iter()
                    .map(|s| bank.row_of(&s.sample_id))
                    .collect::<Result<Vec<_>>>()?;
                let before = trace.then(|| (state.student.checksum(), row_checksums(bank, &rows)));
                let tr = calibrate(bank, &members, &state.student, cfg.inner_steps, cfg.prompt_lr)?;
                if let Some(&first) = tr.step_losses.first() {
                    if !first.is_finite() {
                        return Err(Error::Divergence {
                            stage: "stage2",
                            epoch: epoch + 1,
                            step: 0,
                            loss: first,
                        });
                    }
                    loss_sum += first * members.len() as f64;
                }
                if let Some((frozen_before, bank_before)) = before {
                    self.observer.on_calibration(&CalibrationEvent {
                        stage: 2,
                        frozen_before,
                        frozen_after: state.student.checksum(),
                        bank_after: row_checksums(bank, &rows),
                        rows,
                        bank_before,
                    });
                }
            }
            state.progress = Progress {
                stage: Stage::Stage2,
                epoch: epoch + 1,
            };
            let record = EpochRecord {
                stage: 2,
                epoch: epoch + 1,
                train_loss: loss_sum / weak.len().max(1) as f64,
                weak_loss: Some(loss_sum / weak.len().max(1) as f64),
                lr: cfg.prompt_lr,
                t: state.t,
                val_student: None,
                val_teacher: None,
            };
            tracing::info!(stage = 2, epoch = epoch + 1, loss = record.train_loss, "epoch done");
            self.observer.on_epoch(state, &record)?;
        }
        if state.bank.is_none() {
            let mut r = rng::stream(self.config.seed, &[rng::tag("bank")]);
            state.bank = Some(PromptBank::for_weak_set(weak, &state.student, self.config.prompt_len, &mut r)?);
        }
        state.progress = Progress {
            stage: Stage::Stage2,
            epoch: cfg.epochs,
        };
        Ok(())
    }

    /// Stage 3: joint teacher-student training. Uses the bank in `state`
    /// when present; without one, weak samples are encoded plainly.
    pub fn stage3(&mut self, state: &mut TrainerState) -> Result<()> {
        let cfg = &self.config.stage3;
        let n_acc = self.data.accurate.len();
        let n = n_acc + self.data.weak.len();
        if n == 0 {
            return Err(Error::InvalidInput("stage 3 needs a nonempty mixed split".into()));
        }
        let start = match state.progress.stage {
            Stage::Init => return Err(Error::InvalidInput("stage 3 requires a completed stage 1".into())),
            Stage::Stage1 | Stage::Stage2 => {
                state.teacher = Some(state.student.clone());
                state.optimizer = AdamW::new(&state.student.params, cfg.weight_decay);
                state.t = 0;
                0
            }
            Stage::Stage3 => state.progress.epoch,
        };
        let sample = |i: usize| {
            if i < n_acc {
                &self.data.accurate[i]
            } else {
                &self.data.weak[i - n_acc]
            }
        };
        let tokens = (0..n)
            .map(|i| state.student.tokenize(&sample(i).expression))
            .collect::<Result<Vec<_>>>()?;
        let per_epoch = batches_per_epoch(n, cfg.batch_size);
        let total = per_epoch * cfg.epochs as u64;
        let schedule = cfg.schedule();
        let lambda = self.loss.lambda;
        for epoch in start..cfg.epochs {
            if cfg.max_steps.is_some_and(|m| state.t >= m) {
                break;
            }
            let order = shuffled(n, self.config.seed, "stage3", epoch);
            let (mut loss_sum, mut weak_sum, mut n_weak) = (0.0, 0.0, 0usize);
            let mut lr = cfg.lr;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                if cfg.max_steps.is_some_and(|m| state.t >= m) {
                    break;
                }
                let step = epoch as u64 * per_epoch + b as u64;
                let trace = self.observer.wants_trace();
                let teacher = state.teacher.as_ref().expect("teacher set at stage 3 entry");
                let teacher_at_calibration = if trace { teacher.checksum() } else { String::new() };

                // (a) inner-loop calibration on the frozen teacher.
                let weak_members: Vec<&ReferringSample> =
                    batch.iter().filter(|&&i| i >= n_acc).map(|&i| sample(i)).collect();
                let mut calibrated = false;
                if let Some(bank) = state.bank.as_mut() {
                    if cfg.inner_steps > 0 && state.t % cfg.update_freq as u64 == 0 && !weak_members.is_empty() {
                        let rows = weak_members
                            .iter()
                            .map(|s| bank.row_of(&s.sample_id))
                            .collect::<Result<Vec<_>>>()?;
                        let before = trace.then(|| row_checksums(bank, &rows));
                        calibrate(bank, &weak_members, teacher, cfg.inner_steps, cfg.prompt_lr)?;
                        calibrated = true;
                        if let Some(bank_before) = before {
                            self.observer.on_calibration(&CalibrationEvent {
                                stage: 3,
                                frozen_before: teacher_at_calibration.clone(),
                                frozen_after: teacher.checksum(),
                                bank_after: row_checksums(bank, &rows),
                                rows,
                                bank_before,
                            });
                        }
                    }
                }

                // (b, c) r_mix with the bank behind a stop-gradient, one student step.
                let bank_before_student = trace.then(|| state.bank.as_ref().map(PromptBank::checksum)).flatten();
                let mut grads = state.student.params.zeros_like();
                let mut prompt_grads = Vec::new();
                for &i in batch {
                    let s = sample(i);
                    let is_weak = i >= n_acc;
                    let prompts = match (&state.bank, is_weak) {
                        (Some(bank), true) => Some(bank.prompts_for(&s.sample_id)?),
                        _ => None,
                    };
                    let w = (if is_weak { lambda } else { 1.0 }) / batch.len() as f64;
                    let g = sample_grad(&state.student, &s.image, &s.mask, &tokens[i], prompts, w, Some(&mut grads), PromptGrad::Severed)?;
                    if !g.loss.is_finite() {
                        return Err(Error::Divergence {
                            stage: "stage3",
                            epoch: epoch + 1,
                            step: step as usize,
                            loss: g.loss,
                        });
                    }
                    loss_sum += g.loss;
                    if is_weak {
                        weak_sum += g.loss;
                        n_weak += 1;
                    }
                    if let (true, Some(pg), Some(bank)) = (trace, g.prompt_grad, &state.bank) {
                        prompt_grads.push((bank.row_of(&s.sample_id)?, pg));
                    }
                }
                lr = poly_lr(cfg.lr, step, total, cfg.poly_power);
                state.optimizer.update(&mut state.student.params, &grads, lr)?;

                // (d) EMA teacher update.
                let alpha = ema_alpha(state.t, &schedule);
                let teacher = state.teacher.as_mut().expect("teacher set at stage 3 entry");
                ema_update(&mut teacher.params, &state.student.params, alpha)?;
                if trace {
                    self.observer.on_step(&StepTrace {
                        t: state.t,
                        calibrated,
                        teacher_at_calibration,
                        prompt_grads,
                        bank_before_student,
                        bank_after_student: state.bank.as_ref().map(PromptBank::checksum),
                        alpha,
                        student: state.student.params.clone(),
                        teacher: teacher.params.clone(),
                    });
                }
                state.t += 1;
            }
            if !state.student.params.all_finite() {
                return Err(Error::Divergence {
                    stage: "stage3",
                    epoch: epoch + 1,
                    step: state.t as usize,
                    loss: f64::NAN,
                });
            }
            state.progress = Progress {
                stage: Stage::Stage3,
                epoch: epoch + 1,
            };
            let teacher = state.teacher.as_ref().expect("teacher set at stage 3 entry");
            let record = EpochRecord {
                stage: 3,
                epoch: epoch + 1,
                train_loss: loss_sum / n as f64,
                weak_loss: (n_weak > 0).then(|| weak_sum / n_weak as f64),
                lr,
                t: state.t,
                val_student: self.validate(&state.student)?,
                val_teacher: self.validate(teacher)?,
            };
            tracing::info!(stage = 3, epoch = epoch + 1, loss = record.train_loss, "epoch done");
            self.observer.on_epoch(state, &record)?;
        }
        if state.progress.stage != Stage::Stage3 {
            state.progress = Progress {
                stage: Stage::Stage3,
                epoch: 0,
            };
        }
        Ok(())
    }
}
