use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {lhs:?} vs {rhs:?} ({context})")]
    Dimension {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault in layer {layer} at timestep {timestep}: membrane potential is NaN")]
    NumericFault { layer: usize, timestep: usize },

    #[error("training fault at epoch {epoch}: {reason}")]
    TrainingFault { epoch: usize, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: ParseLocation,
        message: String,
    },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("empty support: every prunable weight is already pruned")]
    EmptySupport,

    #[error("no timestep search space for T = {timesteps}; use plain IMP or EB instead")]
    NoSearchSpace { timesteps: usize },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("shape mismatch between architectures in layers: {0:?}")]
    Architecture(Vec<String>),

    #[error("no records match report kind `{0}`")]
    EmptyReport(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseLocation {
    ByteOffset(u64),
    Line(usize),
}

impl std::fmt::Display for ParseLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseLocation::ByteOffset(o) => write!(f, "byte offset {o}"),
            ParseLocation::Line(l) => write!(f, "line {l}"),
        }
    }
}

/// Coarse error classes, used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Training,
    Other,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::Contract(_)
            | Error::NoSearchSpace { .. }
            | Error::Mode(_)
            | Error::Architecture(_)
            | Error::Dimension { .. } => ErrorClass::Config,
            Error::Data(_) | Error::Parse { .. } | Error::EmptyReport(_) | Error::Lookup(_) => {
                ErrorClass::Data
            }
            Error::NumericFault { .. } | Error::TrainingFault { .. } | Error::EmptySupport => {
                ErrorClass::Training
            }
            Error::Io { .. } | Error::Serde(_) => ErrorClass::Other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
