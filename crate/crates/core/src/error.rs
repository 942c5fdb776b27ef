use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the pipeline stages.
///
/// The variants map onto the CLI exit-code classes: configuration problems,
/// data validation failures and numerical non-convergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data validation error: {0}")]
    Validation(String),

    #[error("missing artifact `{}`: run the producing stage first", .0.display())]
    MissingArtifact(PathBuf),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{context}: did not converge after {iterations} iterations (trace: {trace})")]
    NonConvergence {
        context: String,
        iterations: usize,
        trace: String,
    },

    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("I/O error on `{}`: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in `{}`: {message}", path.display())]
    Csv { path: PathBuf, message: String },
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Validation(_) | Error::MissingArtifact(_) | Error::Csv { .. } | Error::Io { .. } => 2,
            Error::Numerical(_) | Error::NonConvergence { .. } | Error::RankDeficient(_) => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
