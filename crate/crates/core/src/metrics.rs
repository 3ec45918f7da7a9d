//! Corpus BLEU and exact-match METEOR.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and candidate n-gram total for one pair.
fn clipped<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let total = (cand.len() + 1).saturating_sub(n);
    let refs = ngram_counts(reference, n);
    let matched = ngram_counts(cand, n)
        .into_iter()
        .map(|(g, c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// Corpus modified n-gram precision as `(clipped matches, candidate n-grams)`.
pub fn modified_precision<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(
    candidates: &[C],
    references: &[R],
    n: usize,
) -> (usize, usize) {
    candidates
        .iter()
        .zip(references)
        .map(|(c, r)| clipped(c.as_ref(), r.as_ref(), n))
        .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Corpus-level BLEU with one reference per candidate.
///
/// Orders for which the candidates contain no n-grams at all are dropped from
/// the geometric mean, so identical short sentences still score 1. With
/// `smoothing`, a zero match count at order n becomes a precision of
/// `1 / (2 · total_n)`.
pub fn bleu<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(
    candidates: &[C],
    references: &[R],
    max_n: usize,
    smoothing: bool,
) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("max_n must be at least 1".into()));
    }
    let c: usize = candidates.iter().map(|x| x.as_ref().len()).sum();
    let r: usize = references.iter().map(|x| x.as_ref().len()).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let (matched, total) = modified_precision(candidates, references, n);
        if total == 0 {
            continue;
        }
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if smoothing {
            1.0 / (2.0 * total as f64)
        } else {
            return Ok(0.0);
        };
        log_sum += p.ln();
        orders += 1;
    }
    Ok(brevity_penalty(c, r) * (log_sum / orders as f64).exp())
}

/// `1` if the candidate total is longer than the reference total, else `exp(1 − r/c)`.
pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

pub fn sentence_bleu<T: Eq + Hash>(candidate: &[T], reference: &[T], max_n: usize, smoothing: bool) -> Result<f64> {
    bleu(&[candidate], &[reference], max_n, smoothing)
}

/// Maximum exact-match alignment with the fewest chunks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

struct Aligner<'a, T> {
    cand: &'a [T],
    reference: &'a [T],
    memo: HashMap<(usize, u128, usize), (usize, usize)>,
}

impl<T: Eq> Aligner<'_, T> {
    /// Best (matches, chunks) for candidate positions `i..`, given the used
    /// reference positions and where the previous candidate token landed
    /// (`prev == 0`: unmatched, otherwise reference index + 1).
    fn best(&mut self, i: usize, used: u128, prev: usize) -> (usize, usize) {
        if i == self.cand.len() {
            return (0, 0);
        }
        if let Some(&r) = self.memo.get(&(i, used, prev)) {
            return r;
        }
        let better = |a: (usize, usize), b: (usize, usize)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);
        let mut out = self.best(i + 1, used, 0);
        for j in 0..self.reference.len() {
            if used & (1 << j) != 0 || self.reference[j] != self.cand[i] {
                continue;
            }
            let (m, ch) = self.best(i + 1, used | (1 << j), j + 1);
            let new_chunk = usize::from(!(prev != 0 && prev == j));
            let cand = (m + 1, ch + new_chunk);
            if better(cand, out) {
                out = cand;
            }
        }
        self.memo.insert((i, used, prev), out);
        out
    }
}

/// Exact-match alignment maximizing matches, then minimizing chunks.
///
/// Exhaustive with memoization for references up to 128 tokens; longer
/// references are truncated to their first 128 tokens for alignment.
pub fn align<T: Eq>(candidate: &[T], reference: &[T]) -> Alignment {
    let reference = &reference[..reference.len().min(128)];
    let mut a = Aligner {
        cand: candidate,
        reference,
        memo: HashMap::new(),
    };
    let (matches, chunks) = a.best(0, 0, 0);
    Alignment { matches, chunks }
}

/// `F_mean · (1 − 0.5·(chunks/matches)³)` with `F_mean = 10PR / (R + 9P)`.
pub fn meteor_from_alignment(a: Alignment, cand_len: usize, ref_len: usize) -> f64 {
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / cand_len as f64;
    let r = m / ref_len as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_lite<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    meteor_from_alignment(align(candidate, reference), candidate.len(), reference.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub qid: String,
    /// Sentence BLEU-1, unsmoothed.
    pub bleu1: f64,
    /// Sentence BLEU-4 with add-half smoothing.
    pub bleu4: f64,
    pub meteor: f64,
    pub missing: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub examples: usize,
    pub generated: usize,
    pub missing: usize,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub bleu1_smoothed: f64,
    pub bleu4_smoothed: f64,
    /// Mean of sentence METEOR scores.
    pub meteor: f64,
    pub counts: Counts,
    pub per_example: Vec<ExampleScores>,
}

/// Scores generations against gold answers, joined by qid.
///
/// Every gold qid is evaluated; a missing generation is scored as empty and
/// counted. A generation whose qid is not in `gold` is an error.
pub fn evaluate_corpus(
    generations: &BTreeMap<String, Vec<String>>,
    gold: &BTreeMap<String, Vec<String>>,
) -> Result<MetricsReport> {
    let unknown: Vec<String> = generations.keys().filter(|q| !gold.contains_key(*q)).cloned().collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownQid(unknown));
    }
    let empty = Vec::new();
    let mut cands = Vec::with_capacity(gold.len());
    let mut refs = Vec::with_capacity(gold.len());
    let mut per_example = Vec::with_capacity(gold.len());
    let mut counts = Counts {
        examples: gold.len(),
        ..Default::default()
    };
    for (qid, reference) in gold {
        let (cand, missing) = match generations.get(qid) {
            Some(c) => (c, false),
            None => (&empty, true),
        };
        counts.generated += usize::from(!missing);
        counts.missing += usize::from(missing);
        counts.candidate_tokens += cand.len();
        counts.reference_tokens += reference.len();
        per_example.push(ExampleScores {
            qid: qid.clone(),
            bleu1: sentence_bleu(cand, reference, 1, false)?,
            bleu4: sentence_bleu(cand, reference, 4, true)?,
            meteor: meteor_lite(cand, reference),
            missing,
        });
        cands.push(cand.clone());
        refs.push(reference.clone());
    }
    let meteor = if per_example.is_empty() {
        0.0
    } else {
        per_example.iter().map(|e| e.meteor).sum::<f64>() / per_example.len() as f64
    };
    Ok(MetricsReport {
        bleu1: bleu(&cands, &refs, 1, false)?,
        bleu4: bleu(&cands, &refs, 4, false)?,
        bleu1_smoothed: bleu(&cands, &refs, 1, true)?,
        bleu4_smoothed: bleu(&cands, &refs, 4, true)?,
        meteor,
        counts,
        per_example,
    })
}

/// Aligned plain-text table, one row per setting.
pub fn format_table(rows: &[(String, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Setting".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}", "Setting", "BLEU-1", "BLEU-4", "METEOR");
    for (label, r) in rows {
        let _ = writeln!(out, "{label:<width$}  {:>7.4}  {:>7.4}  {:>7.4}", r.bleu1, r.bleu4, r.meteor);
    }
    out
}

impl MetricsReport {
    pub fn to_table(&self, label: &str) -> String {
        format_table(&[(label.to_string(), self)])
    }
}
