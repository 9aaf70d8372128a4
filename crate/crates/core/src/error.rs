use std::io;

use thiserror::Error;

pub type Result<T, E = RomError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RomError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("nonlinear iteration did not converge at t = {time} after {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        time: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid snapshot set: {0}")]
    InvalidSnapshots(String),

    #[error("empty window [{t0}, {t1}]: fewer than two snapshots")]
    EmptyWindow { t0: f64, t1: f64 },

    #[error("weight matrix is not symmetric positive definite")]
    WeightNotSpd,

    #[error("snapshot set has no energy: no POD modes")]
    NoModes,

    #[error("truncation {requested} out of range 1..={available}")]
    Truncation { requested: usize, available: usize },

    #[error("retained count {requested} exceeds numerical rank {rank}")]
    RankExceeded { requested: usize, rank: usize },

    #[error("data matrix is identically zero")]
    ZeroDataMatrix,

    #[error("times misaligned: {0}")]
    TimeMisalignment(String),

    #[error("empty candidate grid: {0}")]
    EmptyGrid(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(RomError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
