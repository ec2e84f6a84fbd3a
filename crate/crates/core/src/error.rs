use alloc::boxed::Box;
use alloc::string::String;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite after {escalations} jitter escalations (last jitter {jitter:e})")]
    NotPositiveDefinite { escalations: u32, jitter: f64 },

    #[error("derivative order {0} is not supported (maximum is 2)")]
    UnsupportedOrder(u8),

    #[error("scalar kernel is not invariant under the group action (deviation {0:e})")]
    NonInvariantKernel(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("objective is not finite at the initial point")]
    NonFiniteInitial,

    #[error("singular state: |q| = {0:e}")]
    SingularState(f64),

    #[error("implicit midpoint solve did not converge at t = {time}")]
    NoConvergence { time: f64 },

    #[error("integration failed at t = {time}: {source}")]
    IntegrationFailed { time: f64, source: Box<Error> },

    #[error("point {index} duplicates an existing input")]
    DuplicatePoint { index: usize },

    #[error("degenerate orbit: |q| = {0:e} leaves the section angle undefined")]
    DegenerateOrbit(f64),

    #[error("invalid bounds on axis {axis}")]
    InvalidBounds { axis: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: &str) -> Error {
    Error::InvalidInput(String::from(msg))
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
