use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid config `{key}`: {message}")]
    Config { key: String, message: String },

    /// Input data is malformed (dimension mismatch, non-finite values, ...).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("singular normalization: {what} {index} has zero norm")]
    SingularNormalization { what: &'static str, index: usize },

    #[error("infinite divergence at entry {index}: q > 0 where p = 0")]
    InfiniteDivergence { index: usize },

    /// Two values that must agree by construction do not.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("brute-force oracle limited to N <= {max}, got {n}")]
    OracleSize { n: usize, max: usize },

    #[error("identity {identity} has fewer than two samples")]
    Split { identity: usize },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("unsupported schema version `{found}` (expected `{expected}`)")]
    Schema { found: String, expected: String },

    #[error("step {step}, stage {stage}: {source}")]
    Stage {
        step: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, step: usize, stage: &'static str) -> Self {
        Error::Stage {
            step,
            stage,
            source: Box::new(self),
        }
    }

    /// Stable machine-readable code, one per failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Input(_) => "input",
            Error::SingularNormalization { .. } => "singular_normalization",
            Error::InfiniteDivergence { .. } => "infinite_divergence",
            Error::Contract(_) => "contract",
            Error::OracleSize { .. } => "oracle_size",
            Error::Split { .. } => "split",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema_version",
            Error::Stage { source, .. } => source.code(),
        }
    }
}
