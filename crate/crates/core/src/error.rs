use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "depth exhausted: interval at generation {generation} has no {requested} further levels (window depth {depth})"
    )]
    DepthExhausted {
        generation: u32,
        requested: u32,
        depth: u32,
    },

    #[error("interval (generation {generation}, index {index}) is outside the window")]
    OutsideWindow { generation: u32, index: u64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("window mismatch: operands live on different dyadic windows")]
    WindowMismatch,

    #[error("invalid Haar coefficient map: {0}")]
    CoefficientMap(String),

    #[error("shift coefficient for L={outer:?}, I={input:?}, J={output:?} violates |c| <= 2^(-(m+n)/2)")]
    CoefficientBound {
        outer: (u32, u64),
        input: (u32, u64),
        output: (u32, u64),
    },

    #[error("invalid shift entry: {0}")]
    ShiftEntry(String),

    #[error("slice index {j} out of range for complexity {k}")]
    SliceIndex { j: u32, k: u32 },

    #[error("sign sequence entries must be +1 or -1")]
    InvalidSign,

    #[error("martingale dynamics violated at (generation {generation}, index {index})")]
    DynamicsViolation { generation: u32, index: u64 },

    #[error("point outside the Bellman domain: {0}")]
    OutsideDomain(String),

    #[error("alpha sequence violates |alpha_I| <= 1/4 or sum alpha_I = 0: {0}")]
    AlphaConstraint(String),

    #[error("matrix is not admissible (symmetric with zero row sums): {0}")]
    NotAdmissible(String),

    #[error("dimension {size} exceeds the configured cap {cap}")]
    DimensionOverflow { size: usize, cap: usize },

    #[error("iteration did not converge after {iterations} steps")]
    NonConvergence { iterations: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("serialization: {0}")]
    Serialization(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
