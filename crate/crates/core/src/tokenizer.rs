//! Word-level tokenizer built from corpus text.
//!
//! Ids 0..=12 are reserved: four control tokens followed by the nine segment
//! tokens. Regular tokens follow in descending frequency order, ties broken
//! lexicographically. Person, behavior, emotion and speaker labels are always
//! present, each as a single token.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Corpus;
use crate::error::{Error, Result};

pub const SOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// Id of the first segment token (`[V]`); the nine segment tokens are contiguous.
pub const SEGMENT_TOKEN_BASE: u32 = 4;
pub const NUM_SPECIALS: usize = 13;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = [
    "<sos>", "<eos>", "<pad>", "<unk>", "[V]", "[BBF]", "[PER]", "[BEH]", "[EMO]", "[SPK]", "[SCR]",
    "[QUE]", "[ANS]",
];

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes a token of its own. A standalone `<unk>` is kept whole so decoded
/// text normalizes back to the same tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk.eq_ignore_ascii_case(SPECIAL_TOKENS[UNK_ID as usize]) {
            out.push(SPECIAL_TOKENS[UNK_ID as usize].to_string());
            continue;
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_lowercase().collect());
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Canonical single-token form of a metadata label.
pub fn label_token(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: Vec<String>,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    /// Builds a vocabulary over subtitles, questions, answers and labels.
    pub fn build(corpora: &[&Corpus], min_freq: usize) -> Self {
        Self::build_with_labels(corpora, &[], min_freq)
    }

    /// Like [`Vocabulary::build`], additionally taking the metadata labels
    /// (but no text) of `label_sources`, so that held-out splits never hit
    /// an unknown label.
    pub fn build_with_labels(corpora: &[&Corpus], label_sources: &[&Corpus], min_freq: usize) -> Self {
        let min_freq = min_freq.max(1);
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut labels: Vec<String> = Vec::new();
        let count = |tok: String, freq: &mut HashMap<String, usize>| {
            *freq.entry(tok).or_default() += 1;
        };
        for corpus in label_sources {
            for ex in &corpus.examples {
                for c in ex.characters() {
                    for l in [&c.person, &c.behavior, &c.emotion] {
                        freq.entry(label_token(l)).or_default();
                        labels.push(label_token(l));
                    }
                }
                for s in &ex.subtitles {
                    freq.entry(label_token(&s.speaker)).or_default();
                    labels.push(label_token(&s.speaker));
                }
            }
        }
        let held_out = labels.len();
        for corpus in corpora {
            for ex in &corpus.examples {
                for c in ex.characters() {
                    for l in [&c.person, &c.behavior, &c.emotion] {
                        labels.push(label_token(l));
                    }
                }
                for s in &ex.subtitles {
                    labels.push(label_token(&s.speaker));
                    for t in normalize(&s.text) {
                        count(t, &mut freq);
                    }
                }
                for t in normalize(&ex.question).into_iter().chain(normalize(&ex.answer)) {
                    count(t, &mut freq);
                }
            }
        }
        for l in &labels[held_out..] {
            count(l.clone(), &mut freq);
        }
        let forced: std::collections::HashSet<&str> = labels.iter().map(String::as_str).collect();
        let mut kept: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(t, n)| {
                (*n >= min_freq || forced.contains(t.as_str())) && !SPECIAL_TOKENS.contains(&t.as_str())
            })
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t)).expect("tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Id of a metadata label, which must be in the vocabulary.
    pub fn label_id(&self, label: &str) -> Result<u32> {
        self.id(&label_token(label))
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// Space-joins tokens, dropping control and segment tokens except `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?;
            if (id as usize) < NUM_SPECIALS && id != UNK_ID {
                continue;
            }
            words.push(tok);
        }
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            specials: self.id_to_token[..NUM_SPECIALS].to_vec(),
            tokens: self.id_to_token[NUM_SPECIALS..].to_vec(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.specials != SPECIAL_TOKENS {
            return Err(Error::Config("vocabulary specials do not match the fixed inventory".into()));
        }
        Self::from_tokens(file.tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
