use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reweighting, model, optimizer, oracle and harness layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    /// Training produced a non-finite loss or update direction.
    #[error("training diverged at step {step}{}", sample_suffix(*.sample))]
    Divergence { step: usize, sample: Option<usize> },

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error on {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

fn sample_suffix(sample: Option<usize>) -> String {
    match sample {
        Some(i) => format!(" (sample {i})"),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}
