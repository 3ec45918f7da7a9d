//! Answer generation: greedy, beam search and nucleus sampling.
//!
//! Every strategy runs against [`NextTokenModel`], which maps the tokens
//! generated so far to next-token logits. [`ContextModel`] adapts a
//! transformer plus an assembled context; tests plug in small table models.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{Payload, Segment, Slot};
use crate::error::{Error, Result};
use crate::model::{log_softmax, Mode, Model, Scalar};
use crate::tokenizer::EOS_ID;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
    Nucleus,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
            Strategy::Nucleus => "nucleus",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "nucleus" => Ok(Strategy::Nucleus),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub beam_width: usize,
    pub length_norm_alpha: f64,
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens: 20,
            beam_width: 5,
            length_norm_alpha: 0.7,
            top_p: 0.9,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1");
        }
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1");
        }
        if !(self.length_norm_alpha >= 0.0) {
            return bad("length_norm_alpha must be non-negative");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Generated ids, ending in EOS unless the length cap was hit.
    pub tokens: Vec<u32>,
    /// Log-probability of each generated token under the (temperature-scaled) model.
    pub log_probs: Vec<f64>,
    pub duration: Duration,
}

impl DecodeResult {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Tokens with a trailing EOS removed.
    pub fn answer_tokens(&self, eos: u32) -> &[u32] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Anything that scores the next token given what has been generated so far.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    /// Terminating token, if the model has one.
    fn eos(&self) -> Option<u32>;
    /// Longest continuation the model can score.
    fn max_new_tokens(&self) -> usize {
        usize::MAX
    }
    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>>;
}

/// A transformer conditioned on an assembled context. Generated tokens carry
/// the `[ANS]` segment and continue the flat position numbering.
pub struct ContextModel<'a, T> {
    pub model: &'a Model<T>,
    pub context: &'a [Slot],
}

impl<'a, T: Scalar> ContextModel<'a, T> {
    pub fn new(model: &'a Model<T>, context: &'a [Slot]) -> Result<Self> {
        let max = model.config.max_seq_len;
        if context.len() >= max {
            return Err(Error::Overflow {
                qid: String::new(),
                len: context.len() + 1,
                max,
            });
        }
        Ok(Self { model, context })
    }
}

impl<T: Scalar> NextTokenModel for ContextModel<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn eos(&self) -> Option<u32> {
        Some(EOS_ID)
    }

    fn max_new_tokens(&self) -> usize {
        self.model.config.max_seq_len - self.context.len()
    }

    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>> {
        let start = self.context.len();
        let mut slots = self.context.to_vec();
        slots.extend(generated.iter().enumerate().map(|(i, &id)| Slot {
            payload: Payload::Token(id),
            segment: Segment::Answer,
            position: start + i,
        }));
        let trace = self.model.forward(&slots, Mode::Eval)?;
        Ok(trace
            .logits_row(slots.len() - 1)
            .iter()
            .map(|x| x.to_f64().unwrap())
            .collect())
    }
}

fn scaled_log_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        log_softmax(logits)
    } else {
        log_softmax(&logits.iter().map(|l| l / temperature).collect::<Vec<_>>())
    }
}

/// `softmax(logits[last] / temperature)`.
pub fn next_distribution(model: &impl NextTokenModel, generated: &[u32], temperature: f64) -> Result<Vec<f64>> {
    let logits = model.next_logits(generated)?;
    Ok(scaled_log_probs(&logits, temperature).into_iter().map(f64::exp).collect())
}

/// Index of the largest entry, lowest index on ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn cap(model: &impl NextTokenModel, cfg: &DecodeConfig) -> usize {
    cfg.max_new_tokens.min(model.max_new_tokens())
}

pub fn greedy_decode(model: &impl NextTokenModel, cfg: &DecodeConfig) -> Result<DecodeResult> {
    let start = Instant::now();
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    for _ in 0..cap(model, cfg) {
        let lp = scaled_log_probs(&model.next_logits(&tokens)?, cfg.temperature);
        let next = argmax(&lp);
        tokens.push(next as u32);
        log_probs.push(lp[next]);
        if model.eos() == Some(next as u32) {
            break;
        }
    }
    Ok(DecodeResult {
        tokens,
        log_probs,
        duration: start.elapsed(),
    })
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_probs: Vec<f64>,
    sum: f64,
}

impl Hypothesis {
    fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.sum
        } else {
            self.sum / (self.tokens.len() as f64).powf(alpha)
        }
    }
}

/// Length-synchronous beam search.
///
/// Each step expands every live hypothesis by every token and keeps the
/// `beam_width` best candidates (ties: earlier beam, then lower id).
/// Candidates ending in EOS are frozen. At the end, frozen and surviving
/// hypotheses compete on `Σ log p / len^alpha`.
pub fn beam_search(model: &impl NextTokenModel, cfg: &DecodeConfig) -> Result<DecodeResult> {
    let start = Instant::now();
    let width = cfg.beam_width.max(1);
    let mut alive = vec![Hypothesis {
        tokens: vec![],
        log_probs: vec![],
        sum: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cap(model, cfg) {
        let mut candidates: Vec<(f64, usize, u32, f64)> = Vec::with_capacity(alive.len() * model.vocab_size());
        for (b, hyp) in alive.iter().enumerate() {
            let lp = scaled_log_probs(&model.next_logits(&hyp.tokens)?, cfg.temperature);
            candidates.extend(lp.iter().enumerate().map(|(v, &l)| (hyp.sum + l, b, v as u32, l)));
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for &(sum, b, v, l) in candidates.iter().take(width) {
            let mut hyp = alive[b].clone();
            hyp.tokens.push(v);
            hyp.log_probs.push(l);
            hyp.sum = sum;
            if model.eos() == Some(v) {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    finished.extend(alive);
    let alpha = cfg.length_norm_alpha;
    // Stable: on equal scores the earlier-frozen hypothesis wins.
    let best = finished
        .into_iter()
        .filter(|h| !h.tokens.is_empty())
        .reduce(|best, h| if h.score(alpha) > best.score(alpha) { h } else { best })
        .unwrap_or(Hypothesis {
            tokens: vec![],
            log_probs: vec![],
            sum: 0.0,
        });
    Ok(DecodeResult {
        tokens: best.tokens,
        log_probs: best.log_probs,
        duration: start.elapsed(),
    })
}

/// Smallest set of highest-probability tokens whose mass reaches `top_p`.
///
/// Tokens are taken in descending probability, lowest id first on ties, and
/// zero-probability tokens are never included. The result is in that order.
pub fn nucleus_set(probs: &[f64], top_p: f64) -> Result<Vec<usize>> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidDistribution(format!("top_p {top_p} outside (0, 1]")));
    }
    if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
    }
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut out = Vec::new();
    for i in order {
        out.push(i);
        mass += probs[i];
        // Slack for summation roundoff, so p = 1 stops at the last nonzero token.
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    Ok(out)
}

/// Draws one token from the renormalized nucleus.
pub fn sample_nucleus(probs: &[f64], top_p: f64, rng: &mut impl Rng) -> Result<usize> {
    let set = nucleus_set(probs, top_p)?;
    let mass: f64 = set.iter().map(|&i| probs[i]).sum();
    let u = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &set {
        acc += probs[i];
        if u < acc {
            return Ok(i);
        }
    }
    Ok(*set.last().expect("nucleus is never empty"))
}

pub fn nucleus_decode(model: &impl NextTokenModel, cfg: &DecodeConfig) -> Result<DecodeResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    for _ in 0..cap(model, cfg) {
        let lp = scaled_log_probs(&model.next_logits(&tokens)?, cfg.temperature);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let next = sample_nucleus(&probs, cfg.top_p, &mut rng)?;
        tokens.push(next as u32);
        log_probs.push(lp[next]);
        if model.eos() == Some(next as u32) {
            break;
        }
    }
    Ok(DecodeResult {
        tokens,
        log_probs,
        duration: start.elapsed(),
    })
}

pub fn decode(model: &impl NextTokenModel, cfg: &DecodeConfig) -> Result<DecodeResult> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy_decode(model, cfg),
        Strategy::Beam => beam_search(model, cfg),
        Strategy::Nucleus => nucleus_decode(model, cfg),
    }
}
