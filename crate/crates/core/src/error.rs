use std::io;

use thiserror::Error;

/// Errors produced by the training core and the memory simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("layer state: {0}")]
    State(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("replay buffer: {0}")]
    Replay(String),
    #[error("infeasible tile plan: operand `{operand}` needs {needed} bytes, half of L1 is {limit} bytes")]
    InfeasiblePlan {
        operand: String,
        needed: usize,
        limit: usize,
    },
    #[error("no efficiency entry for {0}")]
    MissingEfficiency(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
