use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate hull: smallest singular value {min_singular:e} below {threshold:e}")]
    DegenerateHull { min_singular: f64, threshold: f64 },

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("transport plan has no mass")]
    DegeneratePlan,

    #[error("bridge time {0} is at or outside the open interval (0, 1)")]
    Endpoint(f64),

    #[error("non-finite value at sample {index}: {what}")]
    Numeric { index: usize, what: String },

    #[error("integration diverged at step {step}")]
    Divergence { step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("training failed at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 input, 3 numeric/divergence, 4 format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::Divergence { .. } => 3,
            Error::Format { .. } | Error::Json(_) => 4,
            Error::Training { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
