//! Pretraining and unlearning loops with validation-based checkpoint selection.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, shuffled_batches, Corpus, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::zero_shot_accuracy;
use crate::losses::{
    baseline_loss_and_grad, contrastive_loss_and_grad, total_unlearn_loss_and_grad, ContrastiveMode,
    LossBreakdown, LossWeights, Method,
};
use crate::model::{DualEncoderModel, Params};
use crate::optim::{Optimizer, OptimizerKind, OptimizerSettings};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Settings of the contrastive pretraining run that produces the original model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub validation_fraction: f64,
    pub contrastive_mode: ContrastiveMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            validation_fraction: 0.1,
            contrastive_mode: ContrastiveMode::ImageToText,
        }
    }
}

/// Settings of one unlearning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub validation_fraction: f64,
    pub contrastive_mode: ContrastiveMode,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::Cliperase,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            validation_fraction: 0.1,
            contrastive_mode: ContrastiveMode::ImageToText,
        }
    }
}

fn validate_common(
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    validation_fraction: f64,
    betas: (f64, f64, f64),
) -> Result<()> {
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(Error::Config(format!("learning_rate must be nonnegative, got {learning_rate}")));
    }
    if epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation_fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    let (b1, b2, eps) = betas;
    if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && eps > 0.0) {
        return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
    }
    Ok(())
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_common(
            self.learning_rate,
            self.epochs,
            self.batch_size,
            self.validation_fraction,
            (self.beta1, self.beta2, self.eps),
        )
    }

    fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        validate_common(
            self.learning_rate,
            self.epochs,
            self.batch_size,
            self.validation_fraction,
            (self.beta1, self.beta2, self.eps),
        )?;
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Selection score; higher is better.
    pub objective: f64,
    pub retain_acc: f64,
    pub forget_acc: Option<f64>,
}

/// Loss trace and validation record of one optimization run.
///
/// Pretraining steps store the contrastive loss in the `l_rm` slot with
/// weights `(1, 0, 0)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub selected_checkpoint_epoch: usize,
}

impl RunHistory {
    /// Index of the best epoch by objective; ties resolve to the earliest.
    fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.iter().fold(None, |best: Option<&EpochRecord>, e| match best {
            Some(b) if b.objective >= e.objective => Some(b),
            _ => Some(e),
        })
    }

    /// Line-oriented text form used inside checkpoints.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let l = &s.loss;
            let _ = writeln!(
                out,
                "step {} {} {} {} {} {} {} {} {}",
                s.epoch, s.step, l.l_fm, l.l_rm, l.l_cm, l.total, l.lambda1, l.lambda2, l.lambda3
            );
        }
        for e in &self.epochs {
            let forget = e.forget_acc.map_or_else(|| "-".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "epoch {} {} {} {}",
                e.epoch, e.objective, e.retain_acc, forget
            );
        }
        let _ = writeln!(out, "selected {}", self.selected_checkpoint_epoch);
        out
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        fn num<T: std::str::FromStr>(ln: usize, s: Option<&str>) -> Result<T> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(ln, "malformed history record"))
        }
        let mut history = RunHistory::default();
        let mut selected = None;
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let mut f = line.split_whitespace();
            match f.next() {
                Some("step") => {
                    let epoch = num(ln, f.next())?;
                    let step = num(ln, f.next())?;
                    let loss = LossBreakdown {
                        l_fm: num(ln, f.next())?,
                        l_rm: num(ln, f.next())?,
                        l_cm: num(ln, f.next())?,
                        total: num(ln, f.next())?,
                        lambda1: num(ln, f.next())?,
                        lambda2: num(ln, f.next())?,
                        lambda3: num(ln, f.next())?,
                    };
                    history.steps.push(StepRecord { epoch, step, loss });
                }
                Some("epoch") => {
                    let epoch = num(ln, f.next())?;
                    let objective = num(ln, f.next())?;
                    let retain_acc = num(ln, f.next())?;
                    let forget_acc = match f.next() {
                        Some("-") => None,
                        other => Some(num(ln, other)?),
                    };
                    history.epochs.push(EpochRecord {
                        epoch,
                        objective,
                        retain_acc,
                        forget_acc,
                    });
                }
                Some("selected") => selected = Some(num(ln, f.next())?),
                _ => return Err(Error::parse(ln, format!("unknown history record `{line}`"))),
            }
            if f.next().is_some() {
                return Err(Error::parse(ln, "trailing data in history record"));
            }
        }
        history.selected_checkpoint_epoch =
            selected.ok_or_else(|| Error::parse(0, "history lacks a `selected` record"))?;
        Ok(history)
    }
}

/// Splits `indices` into (train, validation) with a seeded shuffle. At least
/// one sample stays in training; validation may be empty for tiny sets.
fn holdout(indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((indices.len() as f64 * fraction).floor() as usize).min(indices.len().saturating_sub(1));
    let val = order.split_off(indices.len() - n_val);
    let mut train = order;
    let mut val = val;
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Endless stream of forget batches: reshuffled each time the forget set is
/// exhausted.
struct CyclingBatches<'a> {
    indices: &'a [usize],
    batch_size: usize,
    seed: u64,
    pass: u64,
    queue: VecDeque<Vec<usize>>,
}

impl<'a> CyclingBatches<'a> {
    fn new(indices: &'a [usize], batch_size: usize, seed: u64) -> Self {
        Self {
            indices,
            batch_size,
            seed,
            pass: 0,
            queue: VecDeque::new(),
        }
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        if self.queue.is_empty() {
            let seed = mix_seed(self.seed, self.pass);
            self.queue = shuffled_batches(self.indices, self.batch_size, seed)?.into();
            self.pass += 1;
        }
        Ok(self.queue.pop_front().expect("refilled above"))
    }
}

fn check_compatible(model: &DualEncoderModel, corpus: &Corpus) -> Result<()> {
    let arch = model.arch();
    if arch.d_img != corpus.d_img {
        return Err(Error::Config(format!(
            "model d_img {} does not match corpus d_img {}",
            arch.d_img, corpus.d_img
        )));
    }
    if arch.vocab_size < corpus.vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary ({}) smaller than corpus vocabulary ({})",
            arch.vocab_size,
            corpus.vocab.len()
        )));
    }
    if arch.max_len < corpus.max_len {
        return Err(Error::Config(format!(
            "model max_len {} shorter than corpus max_len {}",
            arch.max_len, corpus.max_len
        )));
    }
    Ok(())
}

fn ensure_finite(loss: f64, grads: &Params, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() && grads.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, step })
    }
}

/// Contrastive training over the whole corpus. Returns the parameters of the
/// epoch with the best held-out zero-shot accuracy.
pub fn pretrain(
    model: DualEncoderModel,
    corpus: &Corpus,
    config: &PretrainConfig,
) -> Result<(DualEncoderModel, RunHistory)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("corpus is empty".into()));
    }
    check_compatible(&model, corpus)?;
    let mut model = model;
    let tau = model.temperature();
    let (train, val) = holdout(&corpus.all_indices(), config.validation_fraction, mix_seed(config.seed, 0x7a1));
    let prompts = corpus.class_prompts();
    let mut optimizer = Optimizer::new(config.optimizer_settings(), model.params());
    let mut history = RunHistory::default();
    let mut best: Option<(f64, Params)> = None;
    let mut global_step = 0;

    for epoch in 1..=config.epochs {
        let epoch_seed = mix_seed(config.seed, epoch as u64);
        for batch_idx in shuffled_batches(&train, config.batch_size, epoch_seed)? {
            global_step += 1;
            let batch = corpus.batch(&batch_idx);
            let (loss, grads) = contrastive_loss_and_grad(&model, &batch, tau, config.contrastive_mode)?;
            ensure_finite(loss, &grads, epoch, global_step)?;
            optimizer.step(model.params_mut(), &grads);
            history.steps.push(StepRecord {
                epoch,
                step: global_step,
                loss: LossBreakdown {
                    l_fm: 0.0,
                    l_rm: loss,
                    l_cm: 0.0,
                    total: loss,
                    lambda1: 1.0,
                    lambda2: 0.0,
                    lambda3: 0.0,
                },
            });
        }
        let eval_idx = if val.is_empty() { &train } else { &val };
        let acc = zero_shot_accuracy(&model, corpus, &prompts, eval_idx)?;
        history.epochs.push(EpochRecord {
            epoch,
            objective: acc,
            retain_acc: acc,
            forget_acc: None,
        });
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, model.params().clone()));
        }
    }
    finish(model, history, best)
}

fn finish(
    mut model: DualEncoderModel,
    mut history: RunHistory,
    best: Option<(f64, Params)>,
) -> Result<(DualEncoderModel, RunHistory)> {
    let selected = history.best_epoch().map(|e| e.epoch).unwrap_or(0);
    history.selected_checkpoint_epoch = selected;
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok((model, history))
}

/// Unlearns the forget set of `split` starting from `model`.
///
/// The original model is snapshotted before the first step. Each step pairs
/// one retain batch with an independently drawn forget batch; an epoch is one
/// pass over the retain training set. After every epoch the score
/// `retain accuracy − forget accuracy` on a held-out validation slice picks
/// the returned checkpoint.
pub fn unlearn(
    model: &DualEncoderModel,
    split: &SplitDataset,
    config: &UnlearnConfig,
) -> Result<(DualEncoderModel, RunHistory)> {
    config.validate()?;
    if split.forget_indices().is_empty() {
        return Err(Error::Input("forget set is empty".into()));
    }
    if split.retain_indices().is_empty() {
        return Err(Error::Input("retain set is empty".into()));
    }
    let corpus = &split.corpus;
    check_compatible(model, corpus)?;

    let original = model.snapshot();
    let mut current = model.clone();
    let tau = current.temperature();
    let weights = config.weights();
    let prompts = corpus.class_prompts();
    let (forget_train, forget_val) =
        holdout(split.forget_indices(), config.validation_fraction, mix_seed(config.seed, 0xf0));
    let (retain_train, retain_val) =
        holdout(split.retain_indices(), config.validation_fraction, mix_seed(config.seed, 0x4e));
    let mut forget_stream = CyclingBatches::new(&forget_train, config.batch_size, mix_seed(config.seed, 0xf1));
    let mut optimizer = Optimizer::new(config.optimizer_settings(), current.params());
    let mut history = RunHistory::default();
    let mut best: Option<(f64, Params)> = None;
    let mut global_step = 0;

    for epoch in 1..=config.epochs {
        let epoch_seed = mix_seed(config.seed, epoch as u64);
        for retain_idx in shuffled_batches(&retain_train, config.batch_size, epoch_seed)? {
            global_step += 1;
            let retain = corpus.batch(&retain_idx);
            let forget = corpus.batch(&forget_stream.next_batch()?);
            let (loss, grads) = match config.method {
                Method::Cliperase => total_unlearn_loss_and_grad(
                    &current,
                    &original,
                    &forget,
                    &retain,
                    weights,
                    tau,
                    config.contrastive_mode,
                )?,
                baseline => baseline_loss_and_grad(
                    baseline,
                    &current,
                    &original,
                    &forget,
                    &retain,
                    tau,
                    config.contrastive_mode,
                )?,
            };
            ensure_finite(loss.total, &grads, epoch, global_step)?;
            optimizer.step(current.params_mut(), &grads);
            history.steps.push(StepRecord {
                epoch,
                step: global_step,
                loss,
            });
        }

        let retain_eval = if retain_val.is_empty() { &retain_train } else { &retain_val };
        let forget_eval = if forget_val.is_empty() { &forget_train } else { &forget_val };
        let retain_acc = zero_shot_accuracy(&current, corpus, &prompts, retain_eval)?;
        let forget_acc = zero_shot_accuracy(&current, corpus, &prompts, forget_eval)?;
        let objective = retain_acc - forget_acc;
        history.epochs.push(EpochRecord {
            epoch,
            objective,
            retain_acc,
            forget_acc: Some(forget_acc),
        });
        if best.as_ref().is_none_or(|(b, _)| objective > *b) {
            best = Some((objective, current.params().clone()));
        }
    }
    finish(current, history, best)
}
