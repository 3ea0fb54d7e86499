use std::io;

use thiserror::Error;

/// Errors raised by the solver and the potential toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("geometry violation: {0}")]
    Geometry(String),
    #[error("CFL violation: dt = {dt} exceeds admissible {admissible}")]
    Cfl { dt: f64, admissible: f64 },
    #[error("NaN detected at t = {t}")]
    NanDetected { t: f64 },
    #[error("drift is not divergence free (max |div b| = {max_divergence}, threshold {threshold})")]
    NotDivergenceFree { max_divergence: f64, threshold: f64 },
    #[error("drift samples do not cover t = {t}")]
    MissingDrift { t: f64 },
    #[error("quadrature did not converge: value {value}, estimated error {error}")]
    Quadrature { value: f64, error: f64 },
    #[error("times too close to the start time: need t - eta >= {minimum}")]
    TimesTooClose { minimum: f64 },
    #[error("snapshot format: {0}")]
    Format(String),
    #[error("unsupported snapshot version {found} (supported up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
