use alloc::string::String;

/// Errors raised by the forecasting core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A hyperparameter or argument is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// NaN or infinity appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller broke an API contract (non-scalar loss, missing gradient, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Batch statistics need at least two samples in train mode.
    #[error("degenerate batch: batch norm in train mode needs B >= 2, got {0}")]
    DegenerateBatch(usize),
    /// Too few samples to estimate a covariance.
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(alloc::format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(alloc::format!($($arg)*)) };
}
pub(crate) use dim_err;
pub(crate) use param_err;
