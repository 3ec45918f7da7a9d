//! Deterministic synthetic corpora.
//!
//! A `metadata_signal` fraction of questions ask what a character is doing or
//! how they feel; the answer is a behavior/emotion label that only exists in
//! the per-character annotations. The rest ask about something a speaker said,
//! and the answer is a word from that subtitle. Box features are a noisy
//! function of the character's labels; frame features are pure noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CharacterAnnotation, Corpus, FeatureDims, Frame, QaExample, Split, Subtitle};
use crate::error::{Error, Result};

const PERSONS: &[&str] = &[
    "Haeyoung", "Dokyung", "Deogi", "Jinsang", "Kyungsu", "Taejin", "Sangseok", "Jiya", "Hun",
    "Soontae", "Anna", "Gitae",
];
const BEHAVIORS: &[&str] = &[
    "walking", "eating", "drinking", "sitting", "standing", "cooking", "reading", "dancing",
    "sleeping", "cleaning", "running", "singing",
];
const EMOTIONS: &[&str] = &[
    "happy", "sad", "angry", "surprised", "fearful", "disgusted", "neutral",
];

struct Template {
    line: &'static str,
    question: &'static str,
    fillers: &'static [&'static str],
}

const TEMPLATES: &[Template] = &[
    Template {
        line: "I want to eat {} tonight.",
        question: "What does {} want to eat?",
        fillers: &["kimchi", "noodles", "pizza", "dumplings", "rice", "soup", "bread", "chicken"],
    },
    Template {
        line: "Let us go to the {} together.",
        question: "Where does {} want to go?",
        fillers: &["park", "office", "hospital", "beach", "market", "school", "library", "station"],
    },
    Template {
        line: "I bought a new {} yesterday.",
        question: "What did {} buy?",
        fillers: &["phone", "bag", "watch", "car", "book", "jacket", "umbrella", "guitar"],
    },
    Template {
        line: "My {} is coming to visit.",
        question: "Who is coming to visit {}?",
        fillers: &["mother", "father", "sister", "brother", "friend", "uncle", "cousin", "boss"],
    },
];

const CHATTER: &[&str] = &[
    "I do not know what to say.",
    "That is not what I meant.",
    "We should talk about it later.",
    "Are you serious right now?",
    "Please listen to me.",
    "It has been a long day.",
];

/// Inclusive count range, serialized as `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

impl From<[usize; 2]> for CountRange {
    fn from([min, max]: [usize; 2]) -> Self {
        Self { min, max }
    }
}

impl From<CountRange> for [usize; 2] {
    fn from(r: CountRange) -> Self {
        [r.min, r.max]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_examples: usize,
    pub n_persons: usize,
    pub n_behaviors: usize,
    pub n_emotions: usize,
    pub frames_per_clip: CountRange,
    pub chars_per_frame: CountRange,
    pub subtitles_per_clip: CountRange,
    pub feature_dims: FeatureDims,
    pub seed: u64,
    /// Fraction of questions answerable only from visual metadata.
    pub metadata_signal: f64,
    /// Standard deviation of the noise added to label-derived box features.
    pub box_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_examples: 600,
            n_persons: 8,
            n_behaviors: 8,
            n_emotions: 6,
            frames_per_clip: CountRange::new(1, 3),
            chars_per_frame: CountRange::new(1, 2),
            subtitles_per_clip: CountRange::new(2, 4),
            feature_dims: FeatureDims::default(),
            seed: 0,
            metadata_signal: 0.7,
            box_noise: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("n_examples", self.n_examples),
            ("n_persons", self.n_persons),
            ("n_behaviors", self.n_behaviors),
            ("n_emotions", self.n_emotions),
            ("feature_dims.video", self.feature_dims.video),
            ("feature_dims.bbox", self.feature_dims.bbox),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, list, v) in [
            ("n_persons", PERSONS.len(), self.n_persons),
            ("n_behaviors", BEHAVIORS.len(), self.n_behaviors),
            ("n_emotions", EMOTIONS.len(), self.n_emotions),
        ] {
            if v > list {
                return bad(format!("{name} must be at most {list}"));
            }
        }
        for (name, r) in [
            ("frames_per_clip", self.frames_per_clip),
            ("chars_per_frame", self.chars_per_frame),
            ("subtitles_per_clip", self.subtitles_per_clip),
        ] {
            if r.min == 0 || r.min > r.max {
                return bad(format!("{name} must satisfy 1 <= min <= max"));
            }
        }
        if !(0.0..=1.0).contains(&self.metadata_signal) {
            return bad("metadata_signal must lie in [0, 1]".into());
        }
        if !(self.box_noise >= 0.0 && self.box_noise.is_finite()) {
            return bad("box_noise must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Train/val/test example counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 80/10/10 split of `n`, with rounding slack going to train.
    pub fn default_for(n: usize) -> Self {
        let val = n / 10;
        let test = n / 10;
        Self {
            train: n - val - test,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

struct Prototypes {
    persons: Vec<Vec<f64>>,
    behaviors: Vec<Vec<f64>>,
    emotions: Vec<Vec<f64>>,
}

struct CastMember {
    person: usize,
    behavior: usize,
    emotion: usize,
}

/// Generates `cfg.n_examples` examples; a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let dims = cfg.feature_dims;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let protos = Prototypes {
        persons: (0..cfg.n_persons).map(|_| gaussian(&mut proto_rng, dims.bbox)).collect(),
        behaviors: (0..cfg.n_behaviors).map(|_| gaussian(&mut proto_rng, dims.bbox)).collect(),
        emotions: (0..cfg.n_emotions).map(|_| gaussian(&mut proto_rng, dims.bbox)).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_meta = (cfg.metadata_signal * cfg.n_examples as f64).round() as usize;
    let mut is_meta: Vec<bool> = (0..cfg.n_examples).map(|i| i < n_meta).collect();
    is_meta.shuffle(&mut rng);

    let examples = is_meta
        .iter()
        .enumerate()
        .map(|(index, &meta)| generate_example(cfg, &protos, &mut rng, index, meta))
        .collect();
    Ok(Corpus::new(examples, dims, Split::Train))
}

fn generate_example(
    cfg: &SyntheticConfig,
    protos: &Prototypes,
    rng: &mut ChaCha8Rng,
    index: usize,
    metadata_question: bool,
) -> QaExample {
    let dims = cfg.feature_dims;
    let cast_size = rng.random_range(1..=cfg.n_persons.min(3));
    let mut people: Vec<usize> = (0..cfg.n_persons).collect();
    people.shuffle(rng);
    let cast: Vec<CastMember> = people[..cast_size]
        .iter()
        .map(|&person| CastMember {
            person,
            behavior: rng.random_range(0..cfg.n_behaviors),
            emotion: rng.random_range(0..cfg.n_emotions),
        })
        .collect();

    let n_frames = cfg.frames_per_clip.sample(rng);
    let mut appeared = vec![false; cast.len()];
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let k = cfg.chars_per_frame.sample(rng).min(cast.len());
        let mut order: Vec<usize> = (0..cast.len()).collect();
        order.shuffle(rng);
        let characters = order[..k]
            .iter()
            .map(|&c| {
                appeared[c] = true;
                let m = &cast[c];
                let scale = 1.0 / 3f64.sqrt();
                let box_feature = (0..dims.bbox)
                    .map(|d| {
                        let signal = protos.persons[m.person][d]
                            + protos.behaviors[m.behavior][d]
                            + protos.emotions[m.emotion][d];
                        signal * scale + cfg.box_noise * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                CharacterAnnotation {
                    box_feature,
                    person: PERSONS[m.person].to_string(),
                    behavior: BEHAVIORS[m.behavior].to_string(),
                    emotion: EMOTIONS[m.emotion].to_string(),
                }
            })
            .collect();
        frames.push(Frame {
            frame_feature: gaussian(rng, dims.video),
            characters,
        });
    }

    // (speaker, template, filler) for informative lines; None for chatter.
    let n_subs = cfg.subtitles_per_clip.sample(rng);
    let mut lines: Vec<(usize, Option<(usize, usize)>, usize)> = Vec::with_capacity(n_subs);
    for _ in 0..n_subs {
        let speaker = rng.random_range(0..cfg.n_persons);
        let informative = rng.random_bool(0.6);
        let template = rng.random_range(0..TEMPLATES.len());
        let filler = rng.random_range(0..TEMPLATES[template].fillers.len());
        let chatter = rng.random_range(0..CHATTER.len());
        let taken = lines
            .iter()
            .any(|(s, t, _)| *s == speaker && t.map(|(t, _)| t) == Some(template));
        if informative && !taken {
            lines.push((speaker, Some((template, filler)), chatter));
        } else {
            lines.push((speaker, None, chatter));
        }
    }

    let (question, answer) = if metadata_question {
        let visible: Vec<&CastMember> = cast
            .iter()
            .zip(&appeared)
            .filter_map(|(m, &a)| a.then_some(m))
            .collect();
        let who = visible[rng.random_range(0..visible.len())];
        let name = PERSONS[who.person];
        if rng.random_bool(0.5) {
            (format!("What is {name} doing?"), BEHAVIORS[who.behavior].to_string())
        } else {
            (format!("How does {name} feel?"), EMOTIONS[who.emotion].to_string())
        }
    } else {
        let informative: Vec<usize> = (0..lines.len()).filter(|&i| lines[i].1.is_some()).collect();
        let pick = if informative.is_empty() {
            let template = rng.random_range(0..TEMPLATES.len());
            let filler = rng.random_range(0..TEMPLATES[template].fillers.len());
            lines[0].1 = Some((template, filler));
            0
        } else {
            informative[rng.random_range(0..informative.len())]
        };
        let (speaker, slot, _) = lines[pick];
        let (template, filler) = slot.expect("picked line is informative");
        let t = &TEMPLATES[template];
        (
            t.question.replace("{}", PERSONS[speaker]),
            t.fillers[filler].to_string(),
        )
    };

    let subtitles = lines
        .iter()
        .map(|&(speaker, slot, chatter)| Subtitle {
            speaker: PERSONS[speaker].to_string(),
            text: match slot {
                Some((t, f)) => TEMPLATES[t].line.replace("{}", TEMPLATES[t].fillers[f]),
                None => CHATTER[chatter].to_string(),
            },
        })
        .collect();

    QaExample {
        qid: format!("syn{}-{index:05}", cfg.seed),
        frames,
        subtitles,
        question,
        answer,
    }
}

/// Generates `sizes.total()` examples and partitions them in order into
/// train, val and test corpora.
pub fn generate_splits(cfg: &SyntheticConfig, sizes: SplitSizes) -> Result<[Corpus; 3]> {
    let cfg = SyntheticConfig {
        n_examples: sizes.total(),
        ..cfg.clone()
    };
    let all = generate_synthetic(&cfg)?;
    let mut it = all.examples.into_iter();
    let mut take = |n: usize, split: Split| Corpus::new(it.by_ref().take(n).collect(), cfg.feature_dims, split);
    let train = take(sizes.train, Split::Train);
    let val = take(sizes.val, Split::Val);
    let test = take(sizes.test, Split::Test);
    Ok([train, val, test])
}

/// Whether the example's answer appears verbatim in one of its subtitles.
pub(crate) fn answer_in_subtitles(ex: &QaExample) -> bool {
    let answer = crate::tokenizer::normalize(&ex.answer);
    ex.subtitles.iter().any(|s| {
        let words = crate::tokenizer::normalize(&s.text);
        words.windows(answer.len()).any(|w| w == answer.as_slice())
    })
}
