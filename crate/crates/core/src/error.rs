use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("label {label} out of range for {len} classes")]
    LabelOutOfRange { label: usize, len: usize },

    #[error("binary target must be 0 or 1, got {0}")]
    InvalidBinaryTarget(f64),

    #[error("degenerate vector in {0}: norm below 1e-12")]
    DegenerateVector(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),

    #[error("maximum logit score requires bounded logits; the neg-distance head is unbounded, use softmax-mss instead")]
    UnboundedLogitsForMls,

    #[error("prototype set already contains a garbage entry")]
    DoubleGarbageAugment,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("insufficient classes on the {side} split: need at least {needed}, have {available} ({what})")]
    InsufficientClasses {
        side: String,
        needed: usize,
        available: usize,
        what: String,
    },

    #[error("class {label} has {available} items but {needed} are needed ({what})")]
    InsufficientItems {
        label: usize,
        available: usize,
        needed: usize,
        what: String,
    },

    #[error("unbalanced evaluation set: {known} known vs {unknown} unknown results")]
    UnbalancedResults { known: usize, unknown: usize },

    #[error("accept bit inconsistent with threshold rule for result {index}")]
    InconsistentAccept { index: usize },

    #[error("no known-query results to score")]
    NoKnownResults,

    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI maps this error to: 1 for configuration
    /// problems, 2 for runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
