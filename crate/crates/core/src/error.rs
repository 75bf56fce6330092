use thiserror::Error;

/// Errors raised by the geometry, quadrature, functional and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("chart differential drops rank at {param:?} (smallest metric eigenvalue {min_eig:e})")]
    RankDeficientChart { param: Vec<f64>, min_eig: f64 },
    #[error("parameter {param:?} lies outside the chart box")]
    OutOfChart { param: Vec<f64> },
    #[error("parameter {param:?} is not a node of the grid")]
    OffGrid { param: Vec<f64> },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("field does not belong to this grid")]
    GridMismatch,
    #[error("field has zero mass for the requested weight")]
    ZeroMass,
    #[error("growth diagnostic needs at least 3 radii, got {0}")]
    InsufficientRadii(usize),
    #[error("density is not normalized: integral = {mass}")]
    NotNormalized { mass: f64 },
    #[error("density has negative values (min {min:e})")]
    NegativeValues { min: f64 },
    #[error("mismatched inputs: {0}")]
    MismatchedInputs(String),
    #[error("mesh Peclet number {peclet:.3} exceeds the limit {limit:.3}")]
    PecletViolation { peclet: f64, limit: f64 },
    #[error("density support reaches the truncation boundary")]
    SupportTooLarge,
    #[error("chart metric is not orthogonal (max |g_ij|/sqrt(g_ii g_jj) = {0:e}); the drift operator needs orthogonal charts")]
    NonOrthogonalChart(f64),
    #[error("linear solve failed: {0}")]
    LinearSolveFailure(String),
    #[error("discount bound violated: |w| = {sup:e} > |l|/delta = {bound:e} at delta = {delta:e}")]
    MaximumPrincipleViolation { delta: f64, sup: f64, bound: f64 },
    #[error("vanishing-discount schedule exhausted without convergence (last dc = {last_dc:e}, dw = {last_dw:e})")]
    NoConvergence { last_dc: f64, last_dw: f64 },
    #[error("growth sandwich fails for h = {h}")]
    GrowthViolation { h: f64 },
    #[error("minimizer lies on the grid boundary; enlarge the truncation radius")]
    MinimizerOnBoundary,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
