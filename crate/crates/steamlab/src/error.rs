//! Crate-wide error type. Variants are grouped by subsystem; the payload is a
//! human-readable description with enough context to act on (offending word,
//! step index, layer name and so on).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("model: {0}")]
    Model(String),

    #[error("edit: {0}")]
    Edit(String),

    #[error("anchors: {0}")]
    Anchors(String),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("linalg: {0}")]
    Linalg(String),

    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
