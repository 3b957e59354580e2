//! Core toolkit for contextual image captioning with entity-aware pre-training.
//!
//! The pipeline works on quadruples of (image, caption, section, description):
//! corpora are ingested from JSONL, filtered and de-duplicated ([`corpus`]),
//! tokenized with a byte-level BPE ([`tokenize`]), annotated with named-entity
//! spans ([`ner`]), corrupted with one of four masking strategies ([`mask`]),
//! partitioned into Easy/Hard subsets by caption-context word overlap
//! ([`split`]), and evaluated with captioning metrics plus entity insertion
//! precision/recall ([`metrics`]). [`synth`] generates a controllable
//! synthetic corpus for end-to-end experiments.

pub mod corpus;
pub mod mask;
pub mod metrics;
pub mod ner;
pub mod rng;
pub mod split;
pub mod synth;
pub mod tokenize;

use thiserror::Error;

/// Toolkit-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed file contents (bad magic, bad JSON where abort is required, ...).
    #[error("format error: {0}")]
    Format(String),
    /// Caller passed something that violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Data failed a contract check (offsets out of range, overlapping spans, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// More mask spans selected than there are sentinel tokens.
    #[error("sentinel budget exceeded: {needed} sentinels needed, {available} reserved")]
    SentinelBudget { needed: usize, available: usize },
}

impl Error {
    /// Process exit code convention: 1 for validation/argument errors, 2 for I/O
    /// and file-format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format(_) => 2,
            Error::InvalidArgument(_) | Error::Validation(_) | Error::SentinelBudget { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
