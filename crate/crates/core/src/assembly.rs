//! Flattening a QA example into the multimodal input sequence.
//!
//! Layout, in order:
//! 1. per frame: `[V]` frame feature, then per character `[BBF]` box feature
//!    and `[PER]`, `[BEH]`, `[EMO]` label tokens;
//! 2. per subtitle: one `[SPK]` speaker token followed by `[SCR]` word tokens;
//! 3. `[QUE]` question tokens;
//! 4. optionally `[ANS]` answer tokens and a terminal `[ANS]` EOS.
//!
//! Positions are flat and 0-based. The model predicts slot `t + 1` from slot
//! `t`, so the loss mask covers the last context slot and every answer slot
//! except the final EOS.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::QaExample;
use crate::error::{Error, Result};
use crate::tokenizer::{normalize, Vocabulary, EOS_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Segment {
    Video = 0,
    BoxFeature = 1,
    Person = 2,
    Behavior = 3,
    Emotion = 4,
    Speaker = 5,
    Script = 6,
    Question = 7,
    Answer = 8,
}

impl Segment {
    pub const COUNT: usize = 9;
    pub const ALL: [Segment; 9] = [
        Segment::Video,
        Segment::BoxFeature,
        Segment::Person,
        Segment::Behavior,
        Segment::Emotion,
        Segment::Speaker,
        Segment::Script,
        Segment::Question,
        Segment::Answer,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Video => "[V]",
            Segment::BoxFeature => "[BBF]",
            Segment::Person => "[PER]",
            Segment::Behavior => "[BEH]",
            Segment::Emotion => "[EMO]",
            Segment::Speaker => "[SPK]",
            Segment::Script => "[SCR]",
            Segment::Question => "[QUE]",
            Segment::Answer => "[ANS]",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Video,
    Bbox,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Token(u32),
    Feature { kind: FeatureKind, values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub payload: Payload,
    pub segment: Segment,
    pub position: usize,
}

impl Slot {
    pub fn token(&self) -> Option<u32> {
        match self.payload {
            Payload::Token(t) => Some(t),
            Payload::Feature { .. } => None,
        }
    }
}

/// Which optional streams enter the sequence. Question and answer are always in.
///
/// Serialized as its label, e.g. `"S+M,V"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModalityMask {
    pub subtitles: bool,
    pub video: bool,
    pub bbox: bool,
    pub metadata: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask {
        subtitles: true,
        video: true,
        bbox: true,
        metadata: true,
    };
    pub const NONE: ModalityMask = ModalityMask {
        subtitles: false,
        video: false,
        bbox: false,
        metadata: false,
    };

    /// Parses a set of stream letters such as `S`, `S,M`, `S+M,V` or `SMVB`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut m = Self::NONE;
        for ch in s.chars() {
            match ch.to_ascii_uppercase() {
                'S' => m.subtitles = true,
                'V' => m.video = true,
                'B' => m.bbox = true,
                'M' => m.metadata = true,
                ',' | '+' | ' ' => {}
                other => {
                    return Err(Error::Config(format!(
                        "unknown modality {other:?} in {s:?} (expected S, V, B, M)"
                    )))
                }
            }
        }
        Ok(m)
    }

    /// Table label: `S`, `S+V`, `S+M,B` and so on.
    pub fn label(&self) -> String {
        let mut head = Vec::new();
        if self.subtitles {
            head.push("S");
        }
        let mut rest = Vec::new();
        if self.metadata {
            rest.push("M");
        }
        if self.video {
            rest.push("V");
        }
        if self.bbox {
            rest.push("B");
        }
        match (head.is_empty(), rest.is_empty()) {
            (_, true) => head.join(""),
            (true, false) => rest.join(","),
            (false, false) => format!("{}+{}", head[0], rest.join(",")),
        }
    }
}

impl TryFrom<String> for ModalityMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<ModalityMask> for String {
    fn from(m: ModalityMask) -> Self {
        m.label()
    }
}

impl std::str::FromStr for ModalityMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    pub qid: String,
    pub slots: Vec<Slot>,
    pub loss_mask: Vec<bool>,
    /// Next-token target, present exactly where `loss_mask` is set.
    pub targets: Vec<Option<u32>>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Human-readable dump: position, segment, payload summary.
    pub fn dump(&self, vocab: &Vocabulary) -> String {
        let mut out = format!("{:>5}  {:<6} payload\n", "pos", "seg");
        for (slot, &masked) in self.slots.iter().zip(&self.loss_mask) {
            let payload = match &slot.payload {
                Payload::Token(t) => vocab.token(*t).unwrap_or("?").to_string(),
                Payload::Feature { kind, values } => {
                    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                    format!("{kind:?} feature dim={} |x|={norm:.3}", values.len())
                }
            };
            let mark = if masked { "  *loss" } else { "" };
            out.push_str(&format!(
                "{:>5}  {:<6} {payload}{mark}\n",
                slot.position,
                slot.segment.name()
            ));
        }
        out
    }
}

/// Builds the flat slot sequence for `ex` under `mask`.
pub fn assemble(
    ex: &QaExample,
    vocab: &Vocabulary,
    mask: ModalityMask,
    include_answer: bool,
    max_seq_len: usize,
) -> Result<AssembledSequence> {
    let answer = if include_answer {
        vocab.encode(&ex.answer)
    } else {
        Vec::new()
    };
    let expected = expanded_length(ex, mask) + if include_answer { answer.len() + 1 } else { 0 };
    if expected > max_seq_len {
        return Err(Error::Overflow {
            qid: ex.qid.clone(),
            len: expected,
            max: max_seq_len,
        });
    }

    let mut slots: Vec<Slot> = Vec::with_capacity(expected);
    let mut push = |payload: Payload, segment: Segment| {
        let position = slots.len();
        slots.push(Slot {
            payload,
            segment,
            position,
        });
    };
    for frame in &ex.frames {
        if mask.video {
            push(
                Payload::Feature {
                    kind: FeatureKind::Video,
                    values: frame.frame_feature.clone(),
                },
                Segment::Video,
            );
        }
        for c in &frame.characters {
            if mask.bbox {
                push(
                    Payload::Feature {
                        kind: FeatureKind::Bbox,
                        values: c.box_feature.clone(),
                    },
                    Segment::BoxFeature,
                );
            }
            if mask.metadata {
                push(Payload::Token(vocab.label_id(&c.person)?), Segment::Person);
                push(Payload::Token(vocab.label_id(&c.behavior)?), Segment::Behavior);
                push(Payload::Token(vocab.label_id(&c.emotion)?), Segment::Emotion);
            }
        }
    }
    if mask.subtitles {
        for s in &ex.subtitles {
            push(Payload::Token(vocab.label_id(&s.speaker)?), Segment::Speaker);
            for t in vocab.encode(&s.text) {
                push(Payload::Token(t), Segment::Script);
            }
        }
    }
    for t in vocab.encode(&ex.question) {
        push(Payload::Token(t), Segment::Question);
    }
    let context_len = slots.len();

    let mut loss_mask = vec![false; expected];
    let mut targets = vec![None; expected];
    if include_answer {
        if context_len == 0 {
            return Err(Error::NoTargets(format!(
                "example {}: no context slot precedes the answer",
                ex.qid
            )));
        }
        for &t in answer.iter().chain(std::iter::once(&EOS_ID)) {
            let prev = slots.len() - 1;
            loss_mask[prev] = true;
            targets[prev] = Some(t);
            slots.push(Slot {
                payload: Payload::Token(t),
                segment: Segment::Answer,
                position: slots.len(),
            });
        }
    }
    debug_assert_eq!(slots.len(), expected);
    Ok(AssembledSequence {
        qid: ex.qid.clone(),
        slots,
        loss_mask,
        targets,
    })
}

/// The closed-form length `N + ΣI + M + ΣJ + L`, counting each character once.
pub fn paper_sequence_length(ex: &QaExample) -> usize {
    let n = ex.frames.len();
    let chars: usize = ex.frames.iter().map(|f| f.characters.len()).sum();
    let m = ex.subtitles.len();
    let words: usize = ex.subtitles.iter().map(|s| normalize(&s.text).len()).sum();
    let l = normalize(&ex.question).len();
    n + chars + m + words + l
}

/// Context length `assemble` produces for `mask` (without answer slots).
pub fn expanded_length(ex: &QaExample, mask: ModalityMask) -> usize {
    let flag = |b: bool| usize::from(b);
    let per_char = flag(mask.bbox) + 3 * flag(mask.metadata);
    let chars: usize = ex.frames.iter().map(|f| f.characters.len()).sum();
    let subtitle_slots: usize = ex.subtitles.iter().map(|s| 1 + normalize(&s.text).len()).sum();
    flag(mask.video) * ex.frames.len()
        + chars * per_char
        + flag(mask.subtitles) * subtitle_slots
        + normalize(&ex.question).len()
}
