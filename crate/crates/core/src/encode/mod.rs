//! Text → embedding: tokenizer, vocabulary and a small trainable encoder.

mod encoder;
mod vocab;

use thiserror::Error;

pub use encoder::{encode_backward, BlockParams, EncoderConfig, EncoderParams, EncoderTape};
pub use vocab::{pieces, tokenize, Vocabulary, BOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot tokenize empty text")]
    EmptyText,
    #[error("token sequence has no non-pad tokens")]
    EmptyTokens,
    #[error("token sequence of length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("expected dimension {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("encoder config: {0}")]
    Config(String),
}

/// A pooled description embedding tied to its sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub site_id: String,
    pub date: chrono::NaiveDate,
    pub vector: Vec<f32>,
}
