//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index ({i}, {j}, {k}) out of range for grid {nr}x{nt}x{np}")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        k: usize,
        nr: usize,
        nt: usize,
        np: usize,
    },

    #[error("refusing to densify: n={n} exceeds cap {cap}")]
    DenseCap { n: usize, cap: usize },

    #[error("ILU factorization breakdown at row {row}: |pivot| = {pivot:e}")]
    IluBreakdown { row: usize, pivot: f64 },

    #[error("operator not positive definite: p.Ap = {value:e} at iteration {iteration}")]
    Indefinite { value: f64, iteration: usize },

    #[error("decomposition error: {0}")]
    Decomposition(String),

    #[error("communication protocol error: {0}")]
    Protocol(String),

    #[error("collective operation failed: {0}")]
    Collective(String),

    #[error("bad magic in field file: {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported field file version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated field file: expected {expected} bytes of payload, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("map does not match grid: {0}")]
    MapMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
