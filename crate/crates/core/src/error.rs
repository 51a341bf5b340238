use std::fmt;
use std::path::PathBuf;

use crate::training::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (bad shapes, empty inputs, ...).
    #[error("{0}")]
    Contract(String),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Input(String),

    /// A NaN or infinity appeared; `site` names the layer or parameter.
    #[error("non-finite value at {site}: {detail}")]
    Numeric { site: String, detail: String },

    #[error("{what} at byte {offset}: {detail}")]
    Parse {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("{path}: row {row}, column {column}: {detail}")]
    Csv {
        path: String,
        row: usize,
        column: usize,
        detail: String,
    },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error(
        "checkpoint format version {found} is not supported (this build reads version {supported})"
    )]
    Version { found: u32, supported: u32 },

    /// Training produced a non-finite loss. Carries the state at the last
    /// completed epoch.
    #[error("training diverged at step {step}: {detail}")]
    Diverged {
        step: u64,
        detail: String,
        last_good: Box<Checkpoint>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn input(msg: impl fmt::Display) -> Self {
        Error::Input(msg.to_string())
    }

    pub fn numeric(site: impl fmt::Display, detail: impl fmt::Display) -> Self {
        Error::Numeric {
            site: site.to_string(),
            detail: detail.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Numeric { .. } => "numeric",
            Error::Parse { .. } | Error::Csv { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Version { .. } => "version",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }
}
