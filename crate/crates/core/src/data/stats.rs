//! Summary statistics printed after corpus generation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::synthetic::answer_in_subtitles;
use super::Corpus;
use crate::tokenizer::normalize;

/// Min / mean / max plus the full histogram of a count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub histogram: BTreeMap<usize, usize>,
}

impl Distribution {
    fn of(values: impl IntoIterator<Item = usize>) -> Self {
        let mut histogram = BTreeMap::new();
        let (mut n, mut sum) = (0usize, 0usize);
        for v in values {
            *histogram.entry(v).or_insert(0) += 1;
            n += 1;
            sum += v;
        }
        Self {
            min: histogram.keys().next().copied().unwrap_or(0),
            max: histogram.keys().next_back().copied().unwrap_or(0),
            mean: if n == 0 { 0.0 } else { sum as f64 / n as f64 },
            histogram,
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "min {} mean {:.2} max {}", self.min, self.mean, self.max)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub examples: usize,
    /// Frames per clip (N).
    pub frames: Distribution,
    /// Subtitles per clip (M).
    pub subtitles: Distribution,
    /// Characters per frame (I).
    pub characters: Distribution,
    /// Words per subtitle (J).
    pub subtitle_words: Distribution,
    /// Words per question (L).
    pub question_words: Distribution,
    /// Words per answer (K).
    pub answer_words: Distribution,
    /// Fraction of examples whose answer does not occur in any subtitle.
    pub metadata_answerable: f64,
}

impl CorpusStats {
    pub fn of(corpus: &Corpus) -> Self {
        let ex = &corpus.examples;
        let meta = ex.iter().filter(|e| !answer_in_subtitles(e)).count();
        Self {
            examples: ex.len(),
            frames: Distribution::of(ex.iter().map(|e| e.frames.len())),
            subtitles: Distribution::of(ex.iter().map(|e| e.subtitles.len())),
            characters: Distribution::of(ex.iter().flat_map(|e| e.frames.iter().map(|f| f.characters.len()))),
            subtitle_words: Distribution::of(
                ex.iter().flat_map(|e| e.subtitles.iter().map(|s| normalize(&s.text).len())),
            ),
            question_words: Distribution::of(ex.iter().map(|e| normalize(&e.question).len())),
            answer_words: Distribution::of(ex.iter().map(|e| normalize(&e.answer).len())),
            metadata_answerable: if ex.is_empty() { 0.0 } else { meta as f64 / ex.len() as f64 },
        }
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "examples: {}", self.examples)?;
        writeln!(f, "  frames per clip (N):      {}", self.frames)?;
        writeln!(f, "  subtitles per clip (M):   {}", self.subtitles)?;
        writeln!(f, "  characters per frame (I): {}", self.characters)?;
        writeln!(f, "  words per subtitle (J):   {}", self.subtitle_words)?;
        writeln!(f, "  words per question (L):   {}", self.question_words)?;
        writeln!(f, "  words per answer (K):     {}", self.answer_words)?;
        write!(f, "  metadata-answerable:      {:.1}%", 100.0 * self.metadata_answerable)
    }
}
