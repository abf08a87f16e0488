use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("no bifurcation detected: {0}")]
    NoBifurcation(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("normalization error: {0}")]
    Normalization(String),
}

pub type ModelResult<T> = Result<T, ModelError>;
