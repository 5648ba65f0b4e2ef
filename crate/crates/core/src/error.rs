use thiserror::Error;

/// Errors raised by the simulator and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("operator is not Hermitian (max deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("operator is not unitary (max |U†U - 1| = {deviation:.3e})")]
    NotUnitary { deviation: f64 },

    #[error("expectation value has imaginary part {imag:.3e}; inputs are not Hermitian")]
    ComplexExpectation { imag: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The requested parameters leave the regime where the short-time
    /// expansions are valid.
    #[error("numeric regime violated: {0}")]
    Regime(String),

    #[error("eigenphase {phase:.6} lies on the logarithm branch cut; use a shorter generating time")]
    BranchCut { phase: f64 },

    #[error("effective Zeeman field vanishes; tilt angle is undefined")]
    ZeroZeeman,

    #[error("envelope fit failed: {0}")]
    Fit(String),

    #[error("design matrix is rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
