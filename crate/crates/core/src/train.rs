//! AdamW training with best-validation selection.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, AssembledSequence, ModalityMask};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{loss, param_layout, Gradients, Mode, Model, ParamInfo, Params, Scalar};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub grad_clip_norm: Option<f64>,
    /// Steps between validation passes; 0 evaluates at the end of each epoch.
    pub eval_every: usize,
    /// Stop after this many validation passes without improvement.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 10,
            max_steps: None,
            grad_clip_norm: Some(1.0),
            eval_every: 0,
            patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if matches!(self.grad_clip_norm, Some(c) if c <= 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &Model<T>) -> Self {
        Self {
            m: model.zero_grads(),
            v: model.zero_grads(),
            step: 0,
        }
    }
}

/// One decoupled-decay Adam update:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`, decay only on weight matrices.
pub fn adamw_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    layout: &[ParamInfo],
    cfg: &TrainConfig,
) -> Result<()> {
    for (info, g) in layout.iter().zip(grads.tensors()) {
        if g.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", info.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    let decay = T::lit(1.0 - cfg.learning_rate * cfg.weight_decay);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (info, (((p, g), m), v)) in layout.iter().zip(tensors) {
        let keep = if info.decays() { decay } else { T::one() };
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
            v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
            let mhat = m.data[i] / c1;
            let vhat = v.data[i] / c2;
            p.data[i] = p.data[i] * keep - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

/// Target-weighted mean loss and gradient over a batch.
///
/// Each example contributes `k_i / Σk` of its own mean gradient, which is the
/// gradient of the mean over every target in the batch, exactly what a padded
/// batch with masked padding computes.
pub fn batch_gradient<T: Scalar>(
    model: &Model<T>,
    batch: &[&AssembledSequence],
    rngs: Option<Vec<ChaCha8Rng>>,
) -> Result<(f64, Gradients<T>)> {
    let total: usize = batch.iter().map(|s| s.num_targets()).sum();
    if total == 0 {
        return Err(Error::NoTargets("batch has no loss positions".into()));
    }
    let mut rngs: Vec<Option<ChaCha8Rng>> = match rngs {
        Some(r) => r.into_iter().map(Some).collect(),
        None => vec![None; batch.len()],
    };
    let parts: Vec<Result<(f64, Gradients<T>)>> = batch
        .par_iter()
        .zip(rngs.par_iter_mut())
        .map(|(seq, rng)| {
            let mode = match rng {
                Some(r) => Mode::Train(r),
                None => Mode::Eval,
            };
            let trace = model.forward(&seq.slots, mode).map_err(|e| with_qid(e, &seq.qid))?;
            let l = loss(&trace, seq)?;
            let g = model.backward(&trace, seq)?;
            Ok((l, g))
        })
        .collect();
    let mut grads = model.zero_grads();
    let mut mean = 0.0;
    for (seq, part) in batch.iter().zip(parts) {
        let (l, g) = part?;
        let w = seq.num_targets() as f64 / total as f64;
        mean += w * l;
        grads.add_scaled(&g, T::lit(w));
    }
    if !mean.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((mean, grads))
}

fn with_qid(e: Error, qid: &str) -> Error {
    match e {
        Error::Overflow { len, max, .. } => Error::Overflow {
            qid: qid.to_string(),
            len,
            max,
        },
        other => other,
    }
}

/// Target-weighted mean loss over `seqs` in eval mode.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, seqs: &[AssembledSequence]) -> Result<f64> {
    let parts: Vec<Result<(f64, usize)>> = seqs
        .par_iter()
        .map(|seq| {
            let trace = model.forward(&seq.slots, Mode::Eval).map_err(|e| with_qid(e, &seq.qid))?;
            Ok((loss(&trace, seq)?, seq.num_targets()))
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for part in parts {
        let (l, k) = part?;
        sum += l * k as f64;
        count += k;
    }
    if count == 0 {
        return Err(Error::NoTargets("no validation targets".into()));
    }
    Ok(sum / count as f64)
}

/// Owns a model and its optimizer state; one `step` is one AdamW update.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub state: AdamState<T>,
    pub config: TrainConfig,
    layout: Vec<ParamInfo>,
    examples_seen: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = AdamState::new(&model);
        let layout = param_layout(&model.config);
        Ok(Self {
            model,
            state,
            config,
            layout,
            examples_seen: 0,
        })
    }

    /// Dropout stream for the `i`-th example ever trained on.
    fn dropout_rng(&self, i: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(i + 1);
        rng
    }

    /// Forward (train mode), backward, clip and update; returns the batch loss.
    pub fn step(&mut self, batch: &[&AssembledSequence]) -> Result<f64> {
        let rngs = (0..batch.len() as u64)
            .map(|j| self.dropout_rng(self.examples_seen + j))
            .collect();
        let (l, mut grads) = batch_gradient(&self.model, batch, Some(rngs))?;
        self.examples_seen += batch.len() as u64;
        if let Some(c) = self.config.grad_clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        adamw_step(&mut self.model.params, &grads, &mut self.state, &self.layout, &self.config)?;
        Ok(l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_val_loss: Option<f64>,
    pub checkpoint_path: Option<String>,
}

impl TrainLog {
    pub fn train_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.train_loss).collect()
    }

    /// `step,train_loss,val_loss,ms_per_step`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss,ms_per_step\n");
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            let val = match evals.peek() {
                Some(e) if e.step == s.step => {
                    let v = e.val_loss;
                    evals.next();
                    format!("{v}")
                }
                _ => String::new(),
            };
            let _ = writeln!(out, "{},{},{},{:.3}", s.step, s.train_loss, val, s.ms);
        }
        out
    }
}

/// Assembles every example with its answer, tagging overflow errors with the qid.
pub fn assemble_corpus(
    corpus: &Corpus,
    vocab: &Vocabulary,
    mask: ModalityMask,
    include_answer: bool,
    max_seq_len: usize,
) -> Result<Vec<AssembledSequence>> {
    corpus
        .examples
        .iter()
        .map(|ex| assemble(ex, vocab, mask, include_answer, max_seq_len))
        .collect()
}

/// Trains on pre-assembled sequences and returns the best-validation model.
///
/// With an empty validation set the final model is returned.
pub fn train_sequences<T: Scalar>(
    model: Model<T>,
    train: &[AssembledSequence],
    val: &[AssembledSequence],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, Option<&EvalRecord>),
) -> Result<(Model<T>, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Params<T>)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let last = batches.len() - 1;
        for (b, idx) in batches.into_iter().enumerate() {
            let batch: Vec<&AssembledSequence> = idx.iter().map(|&i| &train[i]).collect();
            let start = Instant::now();
            let l = trainer.step(&batch)?;
            step += 1;
            let record = StepRecord {
                step,
                epoch,
                train_loss: l,
                ms: start.elapsed().as_secs_f64() * 1e3,
            };
            let due = if cfg.eval_every == 0 { b == last } else { step % cfg.eval_every == 0 };
            let capped = cfg.max_steps.is_some_and(|m| step >= m);
            let mut eval = None;
            if !val.is_empty() && (due || capped) {
                let v = evaluate_loss(&trainer.model, val)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite("validation loss".into()));
                }
                if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                    best = Some((v, trainer.model.params.clone()));
                    log.best_step = step;
                    log.best_val_loss = Some(v);
                    stale = 0;
                } else {
                    stale += 1;
                }
                eval = Some(EvalRecord { step, val_loss: v });
            }
            on_step(&record, eval.as_ref());
            log.steps.push(record);
            if let Some(e) = eval {
                log.evals.push(e);
            }
            if capped || cfg.patience.is_some_and(|p| stale >= p) {
                break 'epochs;
            }
        }
    }

    let mut model = trainer.model;
    match best {
        Some((_, params)) => model.params = params,
        None => log.best_step = step,
    }
    Ok((model, log))
}

/// Assembles both corpora under `mask` and trains.
pub fn train<T: Scalar>(
    model: Model<T>,
    train_corpus: &Corpus,
    val_corpus: &Corpus,
    vocab: &Vocabulary,
    mask: ModalityMask,
    cfg: &TrainConfig,
) -> Result<(Model<T>, TrainLog)> {
    let max = model.config.max_seq_len;
    let train_seqs = assemble_corpus(train_corpus, vocab, mask, true, max)?;
    let val_seqs = assemble_corpus(val_corpus, vocab, mask, true, max)?;
    train_sequences(model, &train_seqs, &val_seqs, cfg, |_, _| {})
}
