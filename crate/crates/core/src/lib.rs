//! Toy-scale multimodal open-ended video question answering.
//!
//! A corpus of video clips (frame features, per-character box features,
//! metadata labels, subtitles) is flattened into one token/feature sequence
//! per question, fed to a small decoder-only transformer trained from scratch,
//! and the answer is decoded with greedy, beam or nucleus search.

pub mod assembly;
pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
