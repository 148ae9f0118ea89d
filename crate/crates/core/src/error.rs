use thiserror::Error;

/// Errors raised by the synthesis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shifted pencil is singular at s = {0}")]
    SingularPencil(String),
    #[error("eigensolver did not converge")]
    EigFailure,
    #[error("system is not stable (max real part {0:e})")]
    UnstableSystem(f64),
    #[error("frequency sweep peak {sweep:e} disagrees with bisection result {bisection:e}")]
    BracketFailure { sweep: f64, bisection: f64 },
    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),
    #[error("Schur decomposition failed")]
    SchurFailure,
    #[error("saddle-point matrix is singular for shift {0}")]
    SaddleSingular(String),
    #[error("saddle-point matrix is ill conditioned (estimate {0:e})")]
    IllConditioned(f64),
    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("low-rank factor rank {rank} exceeds limit {limit}")]
    RankRunaway { rank: usize, limit: usize },
    #[error("no feasible robustness margin up to gamma_max = {0}")]
    InfeasibleAtGammaMax(f64),
    #[error("characteristic values tie at the truncation boundary (order {0})")]
    TieAtCut(usize),
    #[error("reduced model would be empty")]
    EmptyModel,
    #[error("error bound is vacuous: eps*(beta+gamma) = {0} >= 1")]
    BoundVacuous(f64),
    #[error("spectral radius condition violated: gamma^2 = {gamma_sq} <= rho = {rho}")]
    SpectralRadiusViolation { gamma_sq: f64, rho: f64 },
    #[error("I - gamma^-2 Y X is nearly singular (condition {0:e})")]
    NearSingularZ(f64),
    #[error("closed observer pencil is not stable")]
    NotStabilizing,
    #[error("constraint matrix J is rank deficient")]
    RankDeficientJ,
    #[error("steady-state Newton iteration diverged")]
    SteadyStateDivergence,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<S: Into<String>>(msg: S) -> Error {
    Error::DimensionMismatch(msg.into())
}
