//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file (JSON/JSONL); offset is a byte position in the file.
    #[error("parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    /// Data violating a documented contract, attributed to a question id.
    #[error("validation error for question '{id}': {message}")]
    Validation { id: String, message: String },

    /// Answer span could not be mapped to token coordinates.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Bad runtime input (out-of-range ids, shape mismatches).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A representation with zero norm reached a cosine similarity.
    #[error("degenerate representation: {0}")]
    Degenerate(String),

    /// Evaluation was asked to score an incomplete prediction map.
    #[error("evaluation error: missing predictions for ids {0:?}")]
    MissingPredictions(Vec<String>),

    /// Checkpoint file is unreadable or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    /// Gradient verification could not run to completion.
    #[error("gradient check error: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Build a `Parse` error from a `serde_json` error plus the source text,
    /// recovering the byte offset from the reported line/column.
    pub fn from_json(err: &serde_json::Error, source: &str) -> Self {
        let line = err.line();
        let column = err.column();
        let offset = byte_offset(source, line, column);
        Error::Parse {
            offset,
            line,
            column,
            message: err.to_string(),
        }
    }
}

fn byte_offset(source: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut off = 0usize;
    for (i, l) in source.split('\n').enumerate() {
        if i + 1 == line {
            return off + column.saturating_sub(1).min(l.len());
        }
        off += l.len() + 1;
    }
    source.len()
}
