use thiserror::Error;

/// Errors raised by the path, operator and certification machinery.
#[derive(Debug, Error)]
pub enum MepError {
    #[error("input error: {0}")]
    Input(String),

    #[error("model evaluation produced a non-finite value: {0}")]
    ModelEvaluation(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("degenerate path: {0}")]
    DegeneratePath(String),

    #[error("field is not in Y: {0}")]
    NotInY(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("converged to the wrong kind of critical point: {0}")]
    WrongCriticalPoint(String),

    #[error("point is not critical: |grad E| = {0:.3e}")]
    NotCritical(f64),

    #[error("frame construction failed: {0}")]
    Frame(String),

    #[error("degenerate saddle: {0}")]
    DegenerateSaddle(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("single-barrier structure suspect: {0}")]
    AssumptionASuspect(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, MepError>;
