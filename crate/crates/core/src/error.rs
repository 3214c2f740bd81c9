use thiserror::Error;

/// Errors raised by the estimation, simulation and featurization routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum AteError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("group '{group}' has {size} members, need at least {required}")]
    GroupTooSmall {
        group: &'static str,
        size: usize,
        required: usize,
    },

    #[error("degenerate lambda grid: lambda_max is zero (outcome constant within group)")]
    DegenerateGrid,

    #[error(
        "coordinate descent did not converge after {sweeps} sweeps (kkt residual {kkt:.3e}); loosen tol or raise max_iter"
    )]
    NotConverged {
        sweeps: usize,
        kkt: f64,
        beta: Vec<f64>,
    },

    #[error("lasso path failed at grid index {index}: {source}")]
    PathFailure {
        index: usize,
        #[source]
        source: Box<AteError>,
    },

    #[error("rank-deficient design: columns {columns:?} are linearly dependent on earlier columns")]
    RankDeficient { columns: Vec<usize> },

    #[error("support of size {support} is not smaller than group size {n_group}; OLS refit is ill-posed")]
    SupportTooLarge { support: usize, n_group: usize },

    #[error(
        "OLS adjustment needs p < min(n_A, n_B) with full-rank groups (p = {p}, n_A = {n_treated}, n_B = {n_control}); use the Lasso-adjusted estimators instead"
    )]
    OlsInfeasible {
        p: usize,
        n_treated: usize,
        n_control: usize,
        dependent_columns: Vec<usize>,
    },

    #[error(
        "degrees of freedom {df} not smaller than group size {n_group} in group '{group}'; use the variance estimate without df adjustment"
    )]
    DfExceedsGroupSize {
        group: &'static str,
        df: usize,
        n_group: usize,
    },

    #[error("{count} assignments exceed the enumeration limit of {limit}")]
    TooManyAssignments { count: u128, limit: u128 },

    #[error("{failed} of {total} bootstrap resamples failed (more than 10%)")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl AteError {
    /// True for errors caused by malformed or inconsistent inputs rather than
    /// numerical failures during estimation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            AteError::InvalidInput(_)
                | AteError::NonFinite { .. }
                | AteError::DimensionMismatch(_)
                | AteError::Io(_)
                | AteError::Parse(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, AteError>;
