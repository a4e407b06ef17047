use autodiff::AdError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("invalid configuration at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn format(what: &'static str, msg: impl ToString) -> Self {
        Error::Format { what, msg: msg.to_string() }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    /// Process exit code for the CLI: 2 for configuration and input
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Autodiff(_)
            | Error::Numerical(_)
            | Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
