//! Crate-wide error type.

use crate::transition::TransitionModelParams;

/// Errors produced by the valuation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation contract (dimension mismatch,
    /// out-of-range argument, inconsistent inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerical routine failed (singular innovation covariance,
    /// indefinite Hessian, rank deficiency).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The input is outside the mathematical domain of the operation
    /// (e.g. unstable dynamics where a stationary distribution is needed).
    #[error("domain error: {0}")]
    Domain(String),

    /// Mode estimation exhausted its iteration budget.
    #[error("mode estimation did not converge after {iterations} iterations (last trajectory delta {last_delta:.3e})")]
    ModeNonConvergence { iterations: usize, last_delta: f64 },

    /// Calibration failed; carries the best parameters seen so far.
    #[error("calibration failed: {message}")]
    Calibration {
        message: String,
        best: Box<TransitionModelParams>,
    },

    /// Configuration file problems.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Prefix an error with a per-scenario context tag.
    pub fn in_scenario(self, scenario: usize) -> Error {
        match self {
            Error::Contract(m) => Error::Contract(format!("scenario {scenario}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("scenario {scenario}: {m}")),
            other => other,
        }
    }
}
