use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate contrast: aggregate difference norm {0:e} is below 1e-12")]
    DegenerateContrast(f64),

    #[error("controller has {count} parameters, budget is {limit}")]
    ParameterBudget { count: usize, limit: usize },

    #[error("checksum mismatch: expected {expected}, found {found}")]
    ChecksumMismatch { expected: String, found: String },

    #[error("unknown token id {0}")]
    UnknownToken(u16),

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("step {step}, {phase}: {source}")]
    Training {
        step: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_step(self, step: usize, phase: &'static str) -> Self {
        Error::Training {
            step,
            phase,
            source: Box::new(self),
        }
    }
}
