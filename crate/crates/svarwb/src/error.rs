use thiserror::Error;

/// Errors produced by model validation, restriction compilation, the
/// enumeration routes and the inference engines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contemporaneous matrix in regime {regime} is numerically singular (rcond {rcond:.3e})")]
    SingularA0 { regime: usize, rcond: f64 },

    #[error("covariance matrix in regime {regime} is not positive definite")]
    NotPositiveDefinite { regime: usize },

    #[error("regime {regime} is non-stationary; long-run responses are undefined")]
    NonStationary { regime: usize },

    #[error("total forecast-error variance underflows for variable {variable} in regime {regime}")]
    ZeroVariance { regime: usize, variable: usize },

    #[error("restriction set for shock {shock} is rank deficient: {rows} rows but rank {rank}")]
    RankDeficientR { shock: usize, rows: usize, rank: usize },

    #[error("restriction index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("restriction target not covered by the declared transform rows: {0}")]
    InadmissibleTransform(String),

    #[error("normalization undefined: diagonal entry {entry} of the contemporaneous matrix in regime {regime} is zero")]
    NormalizationUndefined { regime: usize, entry: usize },

    #[error("recursive rank check unavailable: shock {shock} carries {found} restrictions, needs at least {needed}")]
    RecursiveSchemeUnavailable { shock: usize, found: usize, needed: usize },

    #[error("solver budget exhausted: {starts} starts, {converged} converged, smallest residual {best_residual:.3e}")]
    SolverBudgetExhausted { starts: usize, converged: usize, best_residual: f64 },

    #[error("equality-plus-orthogonality system is not square: {equations} equations, {unknowns} unknowns")]
    NotSquareSystem { equations: usize, unknowns: usize },

    #[error("restriction pattern is not recursively just identified: {0}")]
    RecursivePatternViolated(String),

    #[error("null space at column {column} has dimension {found}, expected {expected} (degenerate reduced-form point)")]
    DegenerateNullSpace { column: usize, found: usize, expected: usize },

    #[error("no regime ordering satisfies the sequential pattern at column {column}")]
    OrderingNotFound { column: usize },

    #[error("regime {regime} has {rows} usable observations, needs at least {needed}")]
    InsufficientObservations { regime: usize, rows: usize, needed: usize },

    #[error("posterior scale matrix in regime {regime} is not positive definite")]
    NonPositiveScale { regime: usize },

    #[error("all posterior draws produced an empty admissible set")]
    AllDrawsInadmissible,

    #[error("no draws retained for the projection confidence set")]
    EmptyRetention,

    #[error("invalid dimensions: {0}")]
    Dims(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
