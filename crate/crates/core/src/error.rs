use thiserror::Error;

/// Errors surfaced by the library. Each variant names the failing stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("optimizer diverged at iteration {iteration}: objective {objective}")]
    Divergence {
        iteration: usize,
        objective: f64,
        trace: Vec<crate::optimizer::TraceRow>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
