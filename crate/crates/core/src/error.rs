use std::io;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
///
/// Each variant maps onto a distinct CLI exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("incompatible file: {0}")]
    Incompatible(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,
    #[error("preprocessing failed for {} item(s): {}", .failures.len(), summarize(.failures))]
    Preprocess { failures: Vec<(String, String)>, written: usize },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

fn summarize(failures: &[(String, String)]) -> String {
    failures
        .iter()
        .map(|(id, why)| format!("{id}: {why}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) => 3,
            Error::Input(_) => 4,
            Error::Model(_) => 5,
            Error::Data(_) | Error::Preprocess { .. } => 6,
            Error::Format(_) | Error::Incompatible(_) => 7,
            Error::Divergence { .. } => 8,
            Error::GradCheck(_) => 9,
            Error::UndefinedSimilarity => 10,
            Error::Io(_) | Error::Wav(_) => 11,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
