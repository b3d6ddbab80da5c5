use std::path::PathBuf;

/// Errors raised across the decoding pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Format {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("too few sessions: scheme needs {need}, dataset has {have}")]
    TooFewSessions { need: usize, have: usize },

    #[error("trial too short: {bins} bins cannot support lag {lag}")]
    TrialTooShort { bins: usize, lag: usize },

    #[error("degenerate stream: {0}")]
    DegenerateStream(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("empty stream: {0}")]
    EmptyStream(String),

    #[error("square root of negative value {0}")]
    NegativeSqrt(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("augmentation rejected: Schur complement is not positive definite")]
    RejectedAugmentation,

    #[error("unknown equation id {0}")]
    UnknownEquation(usize),

    #[error("model error: {0}")]
    Model(String),

    #[error("every predicted row is NaN")]
    AllNan,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
