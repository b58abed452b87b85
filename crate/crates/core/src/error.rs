use thiserror::Error;

/// Errors produced by model construction, fitting and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate covariate: fewer than 2 distinct values")]
    DegenerateCovariate,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(
        "infeasible mean {target} for observation {index:?}: outside the open response hull ({lo}, {hi}); \
         try a different link or a larger smoothing parameter"
    )]
    InfeasibleMean {
        index: Option<usize>,
        target: f64,
        lo: f64,
        hi: f64,
    },

    #[error("fit diverged: {0}")]
    Diverged(String),

    #[error("domain error at observation {index}: {reason}")]
    Domain { index: usize, reason: String },

    #[error("negative responses are not allowed by variance family {0}")]
    NegativeResponses(String),

    #[error("variance degeneracy at observation {index}: tilted variance {variance:e} below floor")]
    VarianceDegenerate { index: usize, variance: f64 },

    #[error("rank deficient matrix: {0}")]
    RankDeficient(String),

    #[error("smoothing parameter selection failed: {0}")]
    Selection(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("schema error in field `{0}`")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
