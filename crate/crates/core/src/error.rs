use thiserror::Error;

/// Errors surfaced by kernels, partitioning, attention and the runtime.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("numerically degenerate input in {op} at row {row}")]
    Degenerate { op: &'static str, row: usize },

    #[error("attention row {row} has every column masked")]
    DegenerateMask { row: usize },

    #[error("invalid partition plan: {0}")]
    InvalidPlan(String),

    #[error("invalid landmark count L={landmarks} for {rows} rows")]
    InvalidLandmarkCount { landmarks: usize, rows: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stalled after {steps} steps: {diagnostic}")]
    Stall { steps: usize, diagnostic: String },

    #[error("message decode error: {0}")]
    Decode(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
