// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong between ingesting interactions and writing a report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A malformed row in an interaction file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The interaction source produced no usable rows.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Invalid or missing configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Splitting the dataset failed (e.g. an empty forget or retain set).
    #[error("split error: {0}")]
    Split(String),

    /// A prompt could not be rendered.
    #[error("prompt error: {0}")]
    Prompt(String),

    /// The token sequence does not fit the model's context window.
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// A token id outside the vocabulary.
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    /// An edge that is not part of the computation graph.
    #[error("unknown edge: {0}")]
    UnknownEdge(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    /// Edge attribution or corrupt-sample construction failed.
    #[error("attribution error: {0}")]
    Attribution(String),

    /// Checkpoint or cache file is malformed.
    #[error("invalid file {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Operation asked for on an empty collection.
    #[error("empty input: {0}")]
    Empty(String),

    /// A report was requested from a run directory lacking its inputs.
    #[error("missing report input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for this error: 2 configuration, 3 divergence,
    /// 4 attribution, 5 missing report input, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Divergence { .. } | Error::NonFinite(_) => 3,
            Error::Attribution(_) => 4,
            Error::MissingInput(_) => 5,
            _ => 1,
        }
    }
}
