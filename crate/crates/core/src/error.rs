use thiserror::Error;

/// Errors raised by the simulation and verification routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("stability bound violated: dt = {dt:e} exceeds {bound:e}")]
    Cfl { dt: f64, bound: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("population ceiling exceeded: {count} particles > {ceiling}")]
    PopulationExplosion { count: usize, ceiling: usize },

    #[error("linear program: {0}")]
    Solver(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics themselves (stability, blow-up,
    /// degenerate flows) as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Cfl { .. }
                | Error::Numerical(_)
                | Error::PopulationExplosion { .. }
                | Error::Solver(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
