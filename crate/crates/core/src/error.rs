use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Shape {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("constraint matrix is rank deficient (rank {rank}, expected {expected})")]
    RankDeficient { rank: usize, expected: usize },

    #[error("flow conservation violated at detection {detection}")]
    Conservation { detection: usize },

    #[error("smoothed solve did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("point is not strictly inside the unit box (coordinate {index} = {value})")]
    NotInterior { index: usize, value: f64 },

    #[error("model error: {0}")]
    Model(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
