use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("value {value} at index {index} lies outside the basis domain [{lo}, {hi}]")]
    Domain {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("model specification error: {0}")]
    Specification(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("REML optimization did not converge after {iterations} iterations (best criterion {best_criterion:.6}, gradient norm {gradient_norm:.3e})")]
    Convergence {
        iterations: usize,
        best_criterion: f64,
        gradient_norm: f64,
        best_params: Vec<f64>,
    },

    #[error("undefined variance: {0}")]
    UndefinedVariance(String),

    #[error("study error: {0}")]
    Study(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
