//! Gridded scalar and vector fields on the torus.

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Samples of a real function on a [`GridSpec`], row-major, tagged with a time.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    samples: Vec<f64>,
    time: f64,
}

impl ScalarField {
    pub fn new(grid: GridSpec, samples: Vec<f64>, time: f64) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} samples for a grid of {} points", samples.len(), grid.len())));
        }
        Ok(Self { grid, samples, time })
    }

    /// Constructs a field without validating the sample count. Caller guarantees the length.
    pub(crate) fn from_parts(grid: GridSpec, samples: Vec<f64>, time: f64) -> Self {
        debug_assert_eq!(samples.len(), grid.len());
        Self { grid, samples, time }
    }

    pub fn zeros(grid: GridSpec, time: f64) -> Self {
        Self::from_parts(grid, vec![0.0; grid.len()], time)
    }

    pub fn constant(grid: GridSpec, value: f64, time: f64) -> Self {
        Self::from_parts(grid, vec![value; grid.len()], time)
    }

    /// Samples `f` at every grid node.
    pub fn from_fn(grid: GridSpec, time: f64, f: impl Fn(&[f64]) -> f64) -> Self {
        let d = grid.dim();
        let samples = (0..grid.len()).map(|i| f(&grid.point(i)[..d])).collect();
        Self::from_parts(grid, samples, time)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn set_time(&mut self, time: f64) {
        self.time = time;
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// Spatial mean over the torus.
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// `∫ f dx` by the (spectrally exact) rectangle rule.
    pub fn integral(&self) -> f64 {
        self.samples.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// `‖f‖_{L²}` on the torus.
    pub fn l2_norm(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.samples.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.samples.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.grid, self.samples.iter().map(|&v| f(v)).collect(), self.time)
    }

    /// Pointwise combination `f(self, other)`; grids must match.
    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        let samples = self.samples.iter().zip(&other.samples).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.grid, samples, self.time))
    }

    /// Max-norm distance to another field on the same grid.
    pub fn max_diff(&self, other: &ScalarField) -> f64 {
        self.samples.iter().zip(&other.samples).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// A d-component vector field; all components share one grid and time.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: Vec<ScalarField>,
    divergence_free: bool,
}

impl VectorField {
    pub fn new(components: Vec<ScalarField>, divergence_free: bool) -> Result<Self> {
        let first =
            components.first().ok_or_else(|| Error::InvalidParameter("vector field without components".into()))?;
        let grid = *first.grid();
        if components.len() != grid.dim() {
            return Err(Error::GridMismatch(format!("{} components in dimension {}", components.len(), grid.dim())));
        }
        for c in &components[1..] {
            grid.ensure_same(c.grid())?;
            if c.time() != first.time() {
                return Err(Error::InvalidParameter("components carry different times".into()));
            }
        }
        Ok(Self { components, divergence_free })
    }

    pub fn zeros(grid: GridSpec, time: f64) -> Self {
        Self { components: (0..grid.dim()).map(|_| ScalarField::zeros(grid, time)).collect(), divergence_free: true }
    }

    /// Spatially constant field `c`.
    pub fn constant(grid: GridSpec, c: &[f64], time: f64) -> Self {
        Self {
            components: (0..grid.dim()).map(|a| ScalarField::constant(grid, c[a], time)).collect(),
            divergence_free: true,
        }
    }

    /// Samples a vector-valued function; `divergence_free` is the caller's assertion.
    pub fn from_fn(grid: GridSpec, time: f64, divergence_free: bool, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let d = grid.dim();
        let values: Vec<Vec<f64>> = (0..grid.len()).map(|i| f(&grid.point(i)[..d])).collect();
        let components =
            (0..d).map(|a| ScalarField::from_parts(grid, values.iter().map(|v| v[a]).collect(), time)).collect();
        Self { components, divergence_free }
    }

    pub fn grid(&self) -> &GridSpec {
        self.components[0].grid()
    }

    pub fn time(&self) -> f64 {
        self.components[0].time()
    }

    pub fn with_time(mut self, time: f64) -> Self {
        for c in &mut self.components {
            c.set_time(time);
        }
        self
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }

    pub fn component(&self, a: usize) -> &ScalarField {
        &self.components[a]
    }

    pub fn is_divergence_free(&self) -> bool {
        self.divergence_free
    }

    /// Pointwise Euclidean norm `|b(x)|`.
    pub fn magnitude(&self) -> ScalarField {
        let grid = *self.grid();
        let samples = (0..grid.len())
            .map(|i| self.components.iter().map(|c| c.samples()[i].powi(2)).sum::<f64>().sqrt())
            .collect();
        ScalarField::from_parts(grid, samples, self.time())
    }

    /// `max_x |b(x)|`.
    pub fn max_norm(&self) -> f64 {
        self.magnitude().max_abs()
    }

    /// Spatial mean vector.
    pub fn mean(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.mean()).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            components: self.components.iter().map(|c| c.scaled(factor)).collect(),
            divergence_free: self.divergence_free,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| c.is_finite())
    }

    /// Linear blend `(1-θ) self + θ other`.
    pub(crate) fn lerp(&self, other: &VectorField, theta: f64) -> Result<Self> {
        let components = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.zip_with(b, |x, y| (1.0 - theta) * x + theta * y))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components, divergence_free: self.divergence_free && other.divergence_free })
    }
}
