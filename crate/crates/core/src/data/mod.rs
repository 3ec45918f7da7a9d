//! Corpus schema for multimodal video QA.
//!
//! A clip is a sequence of frames, each carrying an opaque clip-level feature
//! vector and zero or more annotated characters (appearance feature plus
//! person / behavior / emotion labels), followed by speaker-attributed
//! subtitles. A question about the clip is paired with a free-form answer.

mod io;
mod stats;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use io::{corpus_hash, load_corpus, parse_corpus, save_corpus, to_jsonl};
pub use stats::{CorpusStats, Distribution};
pub use synthetic::{generate_splits, generate_synthetic, CountRange, SplitSizes, SyntheticConfig};

/// Dimensions of the video (per-frame) and bounding-box feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct FeatureDims {
    pub video: usize,
    pub bbox: usize,
}

impl FeatureDims {
    pub fn new(video: usize, bbox: usize) -> Self {
        Self { video, bbox }
    }
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self { video: 32, bbox: 32 }
    }
}

impl From<[usize; 2]> for FeatureDims {
    fn from([video, bbox]: [usize; 2]) -> Self {
        Self { video, bbox }
    }
}

impl From<FeatureDims> for [usize; 2] {
    fn from(d: FeatureDims) -> Self {
        [d.video, d.bbox]
    }
}

/// One annotated character inside a frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterAnnotation {
    pub box_feature: Vec<f64>,
    pub person: String,
    pub behavior: String,
    pub emotion: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_feature: Vec<f64>,
    #[serde(default)]
    pub characters: Vec<CharacterAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subtitle {
    pub speaker: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub qid: String,
    #[serde(default)]
    pub frames: Vec<Frame>,
    #[serde(default)]
    pub subtitles: Vec<Subtitle>,
    pub question: String,
    pub answer: String,
}

impl QaExample {
    /// Iterates every character annotation in frame order.
    pub fn characters(&self) -> impl Iterator<Item = &CharacterAnnotation> {
        self.frames.iter().flat_map(|f| f.characters.iter())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub examples: Vec<QaExample>,
    pub feature_dims: FeatureDims,
    pub split: Split,
}

impl Corpus {
    pub fn new(examples: Vec<QaExample>, feature_dims: FeatureDims, split: Split) -> Self {
        Self {
            examples,
            feature_dims,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, qid: &str) -> Option<&QaExample> {
        self.examples.iter().find(|e| e.qid == qid)
    }
}

fn check_vector(out: &mut Vec<String>, field: &str, values: &[f64], dim: usize) {
    if values.len() != dim {
        out.push(format!("{field}: has {} entries, expected {dim}", values.len()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        out.push(format!("{field}: non-finite entry at index {i}"));
    }
}

fn check_label(out: &mut Vec<String>, field: &str, value: &str) {
    if value.trim().is_empty() {
        out.push(format!("{field}: empty"));
    }
}

/// Lists every schema violation of `ex`. An empty list means the example is valid.
pub fn validate_example(ex: &QaExample, dims: FeatureDims) -> Vec<String> {
    let mut out = Vec::new();
    check_label(&mut out, "qid", &ex.qid);
    for (n, frame) in ex.frames.iter().enumerate() {
        check_vector(
            &mut out,
            &format!("frames[{n}].frame_feature"),
            &frame.frame_feature,
            dims.video,
        );
        for (i, c) in frame.characters.iter().enumerate() {
            let base = format!("frames[{n}].characters[{i}]");
            check_vector(&mut out, &format!("{base}.box_feature"), &c.box_feature, dims.bbox);
            check_label(&mut out, &format!("{base}.person"), &c.person);
            check_label(&mut out, &format!("{base}.behavior"), &c.behavior);
            check_label(&mut out, &format!("{base}.emotion"), &c.emotion);
        }
    }
    for (m, s) in ex.subtitles.iter().enumerate() {
        check_label(&mut out, &format!("subtitles[{m}].speaker"), &s.speaker);
        check_label(&mut out, &format!("subtitles[{m}].text"), &s.text);
    }
    check_label(&mut out, "question", &ex.question);
    check_label(&mut out, "answer", &ex.answer);
    out
}
