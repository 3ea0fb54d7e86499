//! Experiment configuration, verification campaigns, empirical Lorentz norms and reports for
//! nonlocal drift-diffusion equations with measure data.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod campaign;
pub mod config;
pub mod experiment;
pub mod lorentz;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] nldd::error::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("report output: {0}")]
    Output(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
