use thiserror::Error;

/// Errors raised by the numerical core, the models and the metrics.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("fully masked row {row}")]
    FullyMaskedRow { row: usize },

    #[error("spectral norm did not converge after {iterations} iterations (best estimate {estimate})")]
    NoConvergence { iterations: usize, estimate: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("target-row sensitivity out of scope: source index {j} exceeds source length {n}")]
    TargetRowOutOfScope { j: usize, n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    PositionOverflow { len: usize, max: usize },

    #[error("unknown token {token} (vocab size {vocab})")]
    UnknownToken { token: u32, vocab: usize },

    #[error("no sentence reaches position {0}")]
    EmptyPosition(usize),

    #[error("empty loss scope")]
    EmptyScope,

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
