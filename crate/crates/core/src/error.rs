use std::path::PathBuf;

/// Errors raised by the toolkit.
///
/// Everything here is a data or configuration problem; the CLI maps all of
/// them to exit status 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("unscored documents: {}", .0.join(", "))]
    Unscored(Vec<String>),
    #[error("cross-lingual constraint infeasible: {0}")]
    ConstraintInfeasible(String),
    #[error("position out of range: q={q}, k={k}, seq_len={seq_len}")]
    OutOfRange { q: usize, k: usize, seq_len: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty loss support")]
    EmptyLossSupport,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("packed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
