//! Periodic pseudo-spectral simulation of nonlocal drift-diffusion equations
//! `∂t u + (b, ∇u) + (-Δ)^s u = μ` together with the potential-theoretic functionals
//! (tails, parabolic Riesz potentials, excess, energy forms, heat kernels) used to
//! check local estimates for their solutions.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod error;
pub mod evolution;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod heat_kernel;
pub mod kernel;
pub mod measure;
pub mod potential;
pub mod quadrature;
pub mod report;
pub mod snapshot;
pub mod spectral;

pub use error::{Error, Result};
pub use field::{ScalarField, VectorField};
pub use grid::{make_grid, GridSpec};
pub use kernel::KernelSpec;
