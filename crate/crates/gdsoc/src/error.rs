//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("state invariant violated at stage {stage}, substep {substep}: {detail}")]
    StateInvariant {
        stage: usize,
        substep: usize,
        detail: String,
    },

    #[error("singular matrix in {context} (condition estimate {cond:.3e})")]
    Singular { context: String, cond: f64 },

    #[error("infeasible constraint set: {0}")]
    Infeasible(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) => 2,
            _ => 3,
        }
    }
}
