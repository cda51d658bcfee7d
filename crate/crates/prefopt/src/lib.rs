//! A desk-scale preference-optimization laboratory.
//!
//! Everything runs on a tiny tabular bigram policy so that every quantity —
//! sequence log-probabilities, margins, losses, and their full analytic
//! gradients — is exact, cheap, and checkable against a finite-difference
//! oracle:
//!
//! * [`policy`] — the differentiable bigram softmax policy;
//! * [`losses`] — the length-controlled margin loss (`lmpo`) and the
//!   `simpo`/`dpo` baselines as pure scalar algebra;
//! * [`normstate`] — running EMA mean/std for Z-score margin normalization;
//! * [`gradients`] — hand-assembled analytic gradients plus the
//!   finite-difference oracle that certifies them;
//! * [`data`] — synthetic preference-pair generation and dataset file I/O;
//! * [`trainer`] — a deterministic mini-batch gradient-descent loop with
//!   per-step metrics;
//! * [`cli`] — the `prefopt` command-line frontend.
//!
//! All arithmetic is in `f64`; every run is a pure function of its inputs and
//! seed, and reruns are byte-identical.

pub mod cli;
pub mod data;
mod fsio;
pub mod gradients;
pub mod losses;
pub mod normstate;
pub mod policy;
pub mod trainer;

/// Crate-wide error type.
///
/// The variants mirror the failure classes the CLI maps to exit codes:
/// domain/state errors ([`Error::InvalidInput`], [`Error::TokenOutOfRange`],
/// [`Error::UninitializedNorm`], [`Error::MissingReference`]) are usage
/// errors, [`Error::NonFinite`] is a numeric abort, and [`Error::Parse`] /
/// [`Error::Io`] are file-format and I/O failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value or combination of values outside an operation's domain.
    #[error("{0}")]
    InvalidInput(String),

    /// A token id at or above the policy's vocabulary size.
    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    /// A normalizer was read before its first update.
    #[error("normalizer state used before any update")]
    UninitializedNorm,

    /// A loss that needs reference log-probabilities was given none.
    #[error("reference log-probabilities required but missing")]
    MissingReference,

    /// A NaN or infinity where a finite number is required.
    #[error("non-finite {what}")]
    NonFinite { what: String },

    /// A malformed input file, reported with its line number.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// An underlying I/O failure, tagged with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: &std::path::Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
