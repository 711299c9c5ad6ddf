//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphDpsError {
    #[error("mesh generation failed: {0}")]
    MeshGeneration(String),

    #[error("graph coarsening failed at level {level}: {reason}")]
    Coarsening { level: usize, reason: String },

    #[error("electrode placement failed: {0}")]
    Electrodes(String),

    #[error("invalid current protocol: {0}")]
    Protocol(String),

    #[error("FEM solve failed: {0}")]
    FemSolve(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("sampling aborted at step {step}: {reason}")]
    Sampling { step: usize, reason: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("phantom generation failed: {0}")]
    Phantom(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("file format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphDpsError>;
