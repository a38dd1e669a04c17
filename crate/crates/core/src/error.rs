use alloc::string::String;

/// Errors raised by the laboratory core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("adjacency graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("infeasible design: {0}")]
    InfeasibleDesign(String),
    #[error("frame violation: {0}")]
    Frame(String),
    #[error("prior calibration did not converge: {0}")]
    Calibration(String),
    #[error("mode search diverged: {0}")]
    Divergence(String),
    #[error("MCMC diagnostics failed: {0}")]
    Diagnostics(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
