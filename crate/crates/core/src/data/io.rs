//! JSON-lines corpus files.
//!
//! Line 1 is a header `{"feature_dims": [D_v, D_b], "split": "..."}`; every
//! following non-blank line is one example object.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{validate_example, Corpus, FeatureDims, QaExample, Split};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    feature_dims: FeatureDims,
    split: Split,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

fn check_dims(ex: &QaExample, dims: FeatureDims) -> Result<()> {
    let mismatch = |field: String, expected: usize, actual: usize| Error::DimensionMismatch {
        qid: ex.qid.clone(),
        field,
        expected,
        actual,
    };
    for (n, frame) in ex.frames.iter().enumerate() {
        if frame.frame_feature.len() != dims.video {
            return Err(mismatch(
                format!("frames[{n}].frame_feature"),
                dims.video,
                frame.frame_feature.len(),
            ));
        }
        for (i, c) in frame.characters.iter().enumerate() {
            if c.box_feature.len() != dims.bbox {
                return Err(mismatch(
                    format!("frames[{n}].characters[{i}].box_feature"),
                    dims.bbox,
                    c.box_feature.len(),
                ));
            }
        }
    }
    Ok(())
}

/// Parses and validates corpus text. An empty input is an empty corpus.
pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((line, header)) = lines.next() else {
        return Ok(Corpus::new(Vec::new(), FeatureDims::default(), Split::default()));
    };
    let header: Header = serde_json::from_str(header).map_err(|e| Error::Parse {
        line,
        message: format!("invalid header: {e}"),
    })?;
    let dims = header.feature_dims;

    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (line, record) in lines {
        let ex: QaExample = serde_json::from_str(record).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        check_dims(&ex, dims)?;
        let violations = validate_example(&ex, dims);
        if !violations.is_empty() {
            return Err(Error::Validation {
                qid: ex.qid,
                violations,
            });
        }
        if !seen.insert(ex.qid.clone()) {
            return Err(Error::Validation {
                qid: ex.qid,
                violations: vec!["qid: duplicate".into()],
            });
        }
        examples.push(ex);
    }
    Ok(Corpus::new(examples, dims, header.split))
}

/// Serializes a corpus to its JSON-lines text.
pub fn to_jsonl(corpus: &Corpus) -> String {
    let header = Header {
        feature_dims: corpus.feature_dims,
        split: corpus.split,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for ex in &corpus.examples {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_jsonl(corpus)).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of the corpus' canonical serialization.
pub fn corpus_hash(corpus: &Corpus) -> String {
    hex::encode(Sha256::digest(to_jsonl(corpus).as_bytes()))
}
