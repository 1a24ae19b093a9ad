use thiserror::Error;

/// Errors raised by the numerical pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square or has non-finite entries: {0}")]
    InvalidMatrix(String),
    #[error("dilation matrix is singular (det = 0)")]
    Singular,
    #[error("dilation matrix is not expansive: smallest eigenvalue modulus {min_modulus} <= 1 + 1e-12")]
    NotExpansive { min_modulus: f64 },
    #[error("smooth quasi-norm requires a real diagonalizable dilation: {0}")]
    SmoothModeUnavailable(String),
    #[error("exponent {0} outside the admissible range")]
    InvalidExponent(f64),
    #[error("sample {index} has quasi-norm {rho} < 1")]
    SampleTooSmall { index: usize, rho: f64 },
    #[error("quadrature did not converge: {0}")]
    QuadratureNotConverged(String),
    #[error("evaluation grid too coarse: cube {cube} holds {points} points, need {required}")]
    GridTooCoarse {
        cube: String,
        points: usize,
        required: usize,
    },
    #[error("matrix is empty")]
    EmptyMatrix,
    #[error("power iteration stalled after {iterations} iterations (last relative change {change:e})")]
    PowerIterationStalled { iterations: usize, change: f64 },
    #[error("Neumann series not contractive: q = {0} >= 1 - 1e-9")]
    NotContractive(f64),
    #[error("window too small: boundary coefficients hold {fraction:.4} of the coefficient energy")]
    WindowTooSmall { fraction: f64 },
    #[error("Calderon sum requested at the zero frequency")]
    ZeroFrequency,
    #[error("pure shear dilations are degenerate; pass the unsafe flag to evaluate them")]
    ShearDegenerate,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("derivative of order {order:?} unavailable for generator {generator}")]
    DerivativeUnavailable { generator: String, order: Vec<u32> },
    #[error("test function {0} has vanishing proxy norm")]
    ZeroNorm(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of an iterative or quadrature procedure, as opposed to
    /// invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::QuadratureNotConverged(_)
                | Error::PowerIterationStalled { .. }
                | Error::NotContractive(_)
                | Error::WindowTooSmall { .. }
                | Error::ZeroNorm(_)
        )
    }
}
