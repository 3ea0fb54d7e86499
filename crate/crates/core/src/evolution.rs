//! Time integration of `∂t u + (b, ∇u) + 𝓛 u = μ` on the torus.
//!
//! Diffusion and the spatially constant part of the drift are integrated exactly in Fourier
//! space; the remaining advection and the forcing go through an exponential RK2 scheme
//! (Cox–Matthews ETD2RK). Advection uses the skew-symmetric form
//! `½[(b, ∇u) + ∇·(b u)]`, dealiased by the two-thirds rule.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::GridSpec;
use crate::kernel::{operator_symbol, KernelSpec};
use crate::measure::{Cylinder, MeasureData};
use crate::spectral::{
    biot_savart_sqg, check_divergence_free, dealias_in_place, leray_project, Spectral, SpectralField,
};

/// Drift drivers accepted by the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftMode {
    Given,
    Sqg,
    None,
}

type DriftFn = dyn Fn(f64) -> VectorField + Send + Sync;

/// Time-indexed drift `b(t, ·)`.
#[derive(Clone)]
pub enum DriftField {
    Zero,
    Steady(VectorField),
    /// Samples at increasing times, linear in between.
    Series {
        times: Vec<f64>,
        fields: Vec<VectorField>,
    },
    Function(Arc<DriftFn>),
}

impl std::fmt::Debug for DriftField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Zero => write!(f, "Zero"),
            Self::Steady(_) => write!(f, "Steady"),
            Self::Series { times, .. } => write!(f, "Series({} samples)", times.len()),
            Self::Function(_) => write!(f, "Function"),
        }
    }
}

impl DriftField {
    pub fn series(times: Vec<f64>, fields: Vec<VectorField>) -> Result<Self> {
        if times.is_empty() || times.len() != fields.len() || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("drift series needs increasing sample times".into()));
        }
        for f in &fields[1..] {
            f.grid().ensure_same(fields[0].grid())?;
        }
        Ok(Self::Series { times, fields })
    }

    pub fn function(f: impl Fn(f64) -> VectorField + Send + Sync + 'static) -> Self {
        Self::Function(Arc::new(f))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero)
    }

    /// True when `b` does not depend on time.
    pub fn is_autonomous(&self) -> bool {
        matches!(self, Self::Zero | Self::Steady(_))
    }

    /// `b(t, ·)` on `grid`.
    pub fn at(&self, grid: &GridSpec, t: f64) -> Result<VectorField> {
        let b = match self {
            Self::Zero => VectorField::zeros(*grid, t),
            Self::Steady(b) => b.clone().with_time(t),
            Self::Series { times, fields } => {
                let tol = 1e-9 * (1.0 + t.abs());
                if t < times[0] - tol || t > times[times.len() - 1] + tol {
                    return Err(Error::MissingDrift { t });
                }
                let k = times.partition_point(|&v| v <= t);
                if k == 0 {
                    fields[0].clone().with_time(t)
                } else if k == times.len() {
                    fields[k - 1].clone().with_time(t)
                } else {
                    let theta = (t - times[k - 1]) / (times[k] - times[k - 1]);
                    fields[k - 1].lerp(&fields[k], theta)?.with_time(t)
                }
            }
            Self::Function(f) => f(t),
        };
        grid.ensure_same(b.grid())?;
        Ok(b)
    }

    /// The drift `c · b`, e.g. `−b` for the dual problem.
    pub fn scaled(&self, c: f64) -> Self {
        match self {
            Self::Zero => Self::Zero,
            Self::Steady(b) => Self::Steady(b.scaled(c)),
            Self::Series { times, fields } => {
                Self::Series { times: times.clone(), fields: fields.iter().map(|f| f.scaled(c)).collect() }
            }
            Self::Function(f) => {
                let f = f.clone();
                Self::Function(Arc::new(move |t| f(t).scaled(c)))
            }
        }
    }

    /// `b(t − shift, ·)`, used to move the time origin of autonomous experiments.
    pub fn time_shifted(&self, shift: f64) -> Self {
        match self {
            Self::Zero | Self::Steady(_) => self.clone(),
            Self::Series { times, fields } => {
                Self::Series { times: times.iter().map(|t| t + shift).collect(), fields: fields.clone() }
            }
            Self::Function(f) => {
                let f = f.clone();
                Self::Function(Arc::new(move |t| f(t - shift).with_time(t)))
            }
        }
    }
}

/// Parameters of a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub kernel: KernelSpec,
    pub dt: f64,
    pub t_end: f64,
    pub drift_mode: DriftMode,
    pub dealias: bool,
    /// Gaussian width used to deposit atoms; `None` selects two grid spacings.
    pub mollification_width: Option<f64>,
    pub snapshot_stride: usize,
    /// Test switch: `false` removes the diffusion term.
    pub diffusion: bool,
    /// Project drifts that fail the divergence check instead of rejecting them.
    pub project_drift: bool,
}

impl SolverConfig {
    pub fn new(kernel: KernelSpec, dt: f64, t_end: f64) -> Self {
        Self {
            kernel,
            dt,
            t_end,
            drift_mode: DriftMode::None,
            dealias: true,
            mollification_width: None,
            snapshot_stride: 1,
            diffusion: true,
            project_drift: false,
        }
    }

    pub fn with_drift_mode(mut self, mode: DriftMode) -> Self {
        self.drift_mode = mode;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.snapshot_stride = stride;
        self
    }

    pub fn with_mollification(mut self, h: f64) -> Self {
        self.mollification_width = Some(h);
        self
    }

    pub fn without_diffusion(mut self) -> Self {
        self.diffusion = false;
        self
    }

    pub fn mollification(&self, grid: &GridSpec) -> f64 {
        self.mollification_width.unwrap_or(2.0 * grid.spacing())
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(Error::InvalidParameter(format!("t_end = {} must be positive", self.t_end)));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::InvalidParameter("snapshot stride must be at least 1".into()));
        }
        let h = self.mollification(grid);
        if h < grid.spacing() * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "mollification width {h} is below the grid spacing {}",
                grid.spacing()
            )));
        }
        if self.kernel.dim() != grid.dim() {
            return Err(Error::InvalidParameter("kernel and grid dimensions differ".into()));
        }
        Ok(())
    }
}

/// Snapshots of a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    grid: GridSpec,
    times: Vec<f64>,
    snapshots: Vec<ScalarField>,
    drift_snapshots: Option<Vec<VectorField>>,
}

impl TrajectoryStore {
    pub fn new(snapshots: Vec<ScalarField>, drift_snapshots: Option<Vec<VectorField>>) -> Result<Self> {
        let first = snapshots.first().ok_or_else(|| Error::InvalidParameter("trajectory without snapshots".into()))?;
        let grid = *first.grid();
        for w in snapshots.windows(2) {
            grid.ensure_same(w[1].grid())?;
            if w[1].time() <= w[0].time() {
                return Err(Error::InvalidParameter("snapshot times must increase".into()));
            }
        }
        if let Some(d) = &drift_snapshots {
            if d.len() != snapshots.len() {
                return Err(Error::InvalidParameter("one drift snapshot per field snapshot".into()));
            }
        }
        let times = snapshots.iter().map(|s| s.time()).collect();
        Ok(Self { grid, times, snapshots, drift_snapshots })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn snapshots(&self) -> &[ScalarField] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn last(&self) -> &ScalarField {
        &self.snapshots[self.snapshots.len() - 1]
    }

    pub fn drift_snapshots(&self) -> Option<&[VectorField]> {
        self.drift_snapshots.as_deref()
    }

    /// `‖b(t)‖_∞` per snapshot, when drifts were recorded.
    pub fn drift_sup(&self) -> Option<Vec<f64>> {
        self.drift_snapshots.as_ref().map(|d| d.iter().map(VectorField::max_norm).collect())
    }

    /// Recorded drifts as a time-indexed drift.
    pub fn drift_field(&self) -> Option<DriftField> {
        self.drift_snapshots.as_ref().map(|d| DriftField::Series { times: self.times.clone(), fields: d.clone() })
    }

    fn tolerance(&self, t: f64) -> f64 {
        1e-9 * (1.0 + t.abs())
    }

    /// Whether `[a, b]` lies inside the stored time range.
    pub fn covers(&self, a: f64, b: f64) -> bool {
        a >= self.start() - self.tolerance(a) && b <= self.end() + self.tolerance(b)
    }

    /// Index of a stored time equal to `t` up to round-off.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = self.times.partition_point(|&v| v < t - self.tolerance(t));
        (k < self.times.len() && (self.times[k] - t).abs() <= self.tolerance(t)).then_some(k)
    }

    /// `u(t)`, linear in time between snapshots.
    pub fn at(&self, t: f64) -> Result<ScalarField> {
        if let Some(k) = self.index_of(t) {
            return Ok(self.snapshots[k].clone().with_time(t));
        }
        if !self.covers(t, t) {
            return Err(Error::Geometry(format!(
                "time {t} outside the trajectory range [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        let k = self.times.partition_point(|&v| v <= t);
        let (a, b) = (&self.snapshots[k - 1], &self.snapshots[k]);
        let theta = (t - a.time()) / (b.time() - a.time());
        Ok(a.zip_with(b, |x, y| (1.0 - theta) * x + theta * y)?.with_time(t))
    }

    /// Index of the snapshot nearest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&v| v < t);
        if k == 0 {
            0
        } else if k == self.times.len() || t - self.times[k - 1] <= self.times[k] - t {
            k - 1
        } else {
            k
        }
    }

    /// `c · u` (drift snapshots untouched).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            times: self.times.clone(),
            snapshots: self.snapshots.iter().map(|s| s.scaled(c)).collect(),
            drift_snapshots: self.drift_snapshots.clone(),
        }
    }

    /// `u + c`.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            times: self.times.clone(),
            snapshots: self.snapshots.iter().map(|s| s.map(|v| v + c)).collect(),
            drift_snapshots: self.drift_snapshots.clone(),
        }
    }

    pub fn l2_norms(&self) -> Vec<f64> {
        self.snapshots.iter().map(ScalarField::l2_norm).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.snapshots.iter().map(ScalarField::mean).collect()
    }
}

/// Solution `u` of the full problem and `v` of the homogeneous problem with `v = u` outside
/// `B_r(x₀)`, both on the window `I_r^⊖(t₀)`.
#[derive(Debug, Clone)]
pub struct ComparisonPair {
    pub u_traj: TrajectoryStore,
    pub v_traj: TrajectoryStore,
    pub cylinder: Cylinder,
}

/// Drift used by the two stages of one step.
#[derive(Debug, Clone)]
pub enum StageDrift {
    None,
    Given { start: VectorField, end: VectorField },
    Sqg,
}

/// Drifts actually used by a step (for replay on a companion solution).
#[derive(Debug, Clone)]
pub struct UsedDrift {
    pub start: VectorField,
    pub end: VectorField,
}

fn phi_functions(z: Complex64) -> (Complex64, Complex64, Complex64) {
    let e = z.exp();
    if z.norm() < 0.1 {
        let mut phi1 = Complex64::new(0.0, 0.0);
        let mut phi2 = Complex64::new(0.0, 0.0);
        let mut term = Complex64::new(1.0, 0.0);
        // term = z^j / (j+1)! for φ1 and z^j/(j+2)! for φ2.
        for j in 0..16 {
            let jf = j as f64;
            phi1 += term / (jf + 1.0);
            phi2 += term / ((jf + 1.0) * (jf + 2.0));
            term = term * z / (jf + 1.0);
        }
        (e, phi1, phi2)
    } else {
        let one = Complex64::new(1.0, 0.0);
        (e, (e - one) / z, (e - one - z) / (z * z))
    }
}

/// Spectral tables and the ETD2RK step for one grid and configuration.
pub struct Integrator {
    grid: GridSpec,
    sp: Arc<Spectral>,
    symbol: Arc<Vec<f64>>,
    config: SolverConfig,
}

impl Integrator {
    pub fn new(grid: &GridSpec, config: &SolverConfig) -> Result<Self> {
        config.validate(grid)?;
        let symbol =
            if config.diffusion { operator_symbol(&config.kernel, grid)? } else { Arc::new(vec![0.0; grid.len()]) };
        Ok(Self { grid: *grid, sp: Spectral::for_grid(grid), symbol, config: config.clone() })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    fn check_drift(&self, b: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(b.grid())?;
        if !b.is_finite() {
            return Err(Error::NonFinite("drift"));
        }
        match check_divergence_free(b) {
            Ok(_) => Ok(b.clone()),
            Err(e) if self.config.project_drift => {
                let _ = e;
                Ok(leray_project(b))
            }
            Err(e) => Err(e),
        }
    }

    fn check_cfl(&self, dt: f64, sup: f64) -> Result<()> {
        let admissible = 0.5 * self.grid.spacing() / sup.max(1e-12);
        if dt > admissible * (1.0 + 1e-12) {
            return Err(Error::Cfl { dt, admissible });
        }
        Ok(())
    }

    /// `−½[(b', ∇u) + ∇·(b' u)]` in Fourier space for the fluctuation `b' = b − b̄`.
    fn advection(&self, uh: &[Complex64], b: &VectorField, mean: &[f64]) -> Vec<Complex64> {
        let d = self.grid.dim();
        let n = self.grid.len();
        let mut ud = uh.to_vec();
        if self.config.dealias {
            dealias_in_place(&self.grid, &mut ud);
        }
        let u = self.sp.inverse_real(&ud);
        let fluct: Vec<Vec<f64>> =
            (0..d).map(|a| b.component(a).samples().iter().map(|v| v - mean[a]).collect()).collect();
        let grads: Vec<Vec<f64>> = (0..d)
            .into_par_iter()
            .map(|a| {
                let c: Vec<Complex64> = ud
                    .iter()
                    .enumerate()
                    .map(|(i, z)| z * Complex64::new(0.0, self.sp.derivative_wavevector(i)[a]))
                    .collect();
                self.sp.inverse_real(&c)
            })
            .collect();
        let mut transport = vec![0.0; n];
        for a in 0..d {
            for i in 0..n {
                transport[i] += fluct[a][i] * grads[a][i];
            }
        }
        let mut out = self.sp.forward_real(&transport);
        let fluxes: Vec<Vec<Complex64>> = (0..d)
            .into_par_iter()
            .map(|a| {
                let prod: Vec<f64> = (0..n).map(|i| fluct[a][i] * u[i]).collect();
                self.sp.forward_real(&prod)
            })
            .collect();
        for (a, flux) in fluxes.iter().enumerate() {
            for (i, z) in flux.iter().enumerate() {
                out[i] += z * Complex64::new(0.0, self.sp.derivative_wavevector(i)[a]);
            }
        }
        for z in out.iter_mut() {
            *z *= -0.5;
        }
        if self.config.dealias {
            dealias_in_place(&self.grid, &mut out);
        }
        out[0] = Complex64::new(0.0, 0.0);
        out
    }

    fn nonlinear(
        &self,
        uh: &[Complex64],
        b: Option<&VectorField>,
        mean: &[f64],
        forcing: Option<&[Complex64]>,
    ) -> Vec<Complex64> {
        let fluct_zero = match b {
            None => true,
            Some(b) => {
                let d = self.grid.dim();
                (0..d).all(|a| b.component(a).samples().iter().all(|&v| v == mean[a]))
            }
        };
        let mut out = match (fluct_zero, b) {
            (false, Some(b)) => self.advection(uh, b, mean),
            _ => vec![Complex64::new(0.0, 0.0); self.grid.len()],
        };
        if let Some(f) = forcing {
            for (o, z) in out.iter_mut().zip(f) {
                *o += z;
            }
        }
        out
    }

    /// One ETD2RK step of length `dt` from `uh` at time `t`.
    pub fn step_coeffs(
        &self,
        uh: &[Complex64],
        t: f64,
        dt: f64,
        drift: &StageDrift,
        forcing: Option<&[Complex64]>,
    ) -> Result<(Vec<Complex64>, Option<UsedDrift>)> {
        let d = self.grid.dim();
        let (b_start, mean) = match drift {
            StageDrift::None => (None, vec![0.0; d]),
            StageDrift::Given { start, .. } => (Some(start.clone()), start.mean()),
            StageDrift::Sqg => {
                let c = SpectralField::new(self.grid, uh.to_vec())?;
                (Some(self.sp.biot_savart_from(&c, t)), vec![0.0; d])
            }
        };
        if let Some(b) = &b_start {
            self.check_cfl(dt, b.max_norm())?;
        }
        let n0 = self.nonlinear(uh, b_start.as_ref(), &mean, forcing);
        let mut e = Vec::with_capacity(uh.len());
        let mut p1 = Vec::with_capacity(uh.len());
        let mut p2 = Vec::with_capacity(uh.len());
        for i in 0..uh.len() {
            let k = self.sp.derivative_wavevector(i);
            let kb: f64 = (0..d).map(|a| k[a] * mean[a]).sum();
            let z = Complex64::new(-dt * self.symbol[i], -dt * kb);
            let (ez, f1, f2) = phi_functions(z);
            e.push(ez);
            p1.push(f1);
            p2.push(f2);
        }
        let a: Vec<Complex64> = (0..uh.len()).map(|i| e[i] * uh[i] + dt * p1[i] * n0[i]).collect();
        if b_start.is_none() {
            // Linear problem with time-independent forcing: the first stage is already exact.
            check_finite(&a, t + dt)?;
            return Ok((a, None));
        }
        let b_end = match drift {
            StageDrift::None => unreachable!("handled above"),
            StageDrift::Given { end, .. } => end.clone(),
            StageDrift::Sqg => {
                let c = SpectralField::new(self.grid, a.clone())?;
                self.sp.biot_savart_from(&c, t + dt)
            }
        };
        self.check_cfl(dt, b_end.max_norm())?;
        let na = self.nonlinear(&a, Some(&b_end), &mean, forcing);
        let out: Vec<Complex64> = (0..uh.len()).map(|i| a[i] + dt * p2[i] * (na[i] - n0[i])).collect();
        check_finite(&out, t + dt)?;
        let start = b_start.expect("drift present");
        Ok((out, Some(UsedDrift { start, end: b_end })))
    }

    fn forcing_coeffs(&self, mu: &MeasureData, t: f64, dt: f64) -> Result<Option<Vec<Complex64>>> {
        if mu.is_zero() {
            return Ok(None);
        }
        let f = measure_forcing(mu, t, dt, &self.grid, self.config.mollification(&self.grid))?;
        if f.samples().iter().all(|&v| v == 0.0) {
            return Ok(None);
        }
        Ok(Some(self.sp.forward_real(f.samples())))
    }

    fn stage_drift(&self, drift: &DriftField, t: f64, dt: f64) -> Result<StageDrift> {
        match self.config.drift_mode {
            DriftMode::Sqg => Ok(StageDrift::Sqg),
            DriftMode::None => Ok(StageDrift::None),
            DriftMode::Given if drift.is_zero() => Ok(StageDrift::None),
            DriftMode::Given => {
                let start = self.check_drift(&drift.at(&self.grid, t)?)?;
                let end = if drift.is_autonomous() {
                    start.clone().with_time(t + dt)
                } else {
                    self.check_drift(&drift.at(&self.grid, t + dt)?)?
                };
                Ok(StageDrift::Given { start, end })
            }
        }
    }
}

fn check_finite(c: &[Complex64], t: f64) -> Result<()> {
    if c.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NanDetected { t })
    }
}

/// Forcing for the slab `[t, t + dt)`: atoms become Gaussian bumps of width `h_moll` carrying
/// `m_i / dt`, and the density enters through its exact time average over the slab.
pub fn measure_forcing(mu: &MeasureData, t: f64, dt: f64, grid: &GridSpec, h_moll: f64) -> Result<ScalarField> {
    if h_moll < grid.spacing() * (1.0 - 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "mollification width {h_moll} is below the grid spacing {}",
            grid.spacing()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("forcing slab needs dt > 0".into()));
    }
    let mut out = vec![0.0; grid.len()];
    for atom in mu.atoms().iter().filter(|a| a.t >= t && a.t < t + dt) {
        grid.check_point(&atom.x)?;
        add_gaussian(grid, &atom.x, h_moll, atom.mass / dt, &mut out);
    }
    if let Some(rho) = mu.density() {
        grid.ensure_same(rho.grid())?;
        let avg = rho.time_integral(t, t + dt);
        for (o, v) in out.iter_mut().zip(avg) {
            *o += v / dt;
        }
    }
    Ok(ScalarField::from_parts(*grid, out, t))
}

/// Adds a periodic Gaussian of width `h` and total (discrete) mass `mass` centered at `x`.
pub(crate) fn add_gaussian(grid: &GridSpec, x: &[f64], h: f64, mass: f64, out: &mut [f64]) {
    let d = grid.dim();
    let n = grid.n();
    let l = grid.length();
    let profiles: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            (0..n)
                .map(|j| {
                    let mut dx = j as f64 * grid.spacing() - x[a];
                    dx -= l * (dx / l).round();
                    (-0.5 * dx * dx / (h * h)).exp()
                })
                .collect()
        })
        .collect();
    let norm: f64 = profiles.iter().map(|p| p.iter().sum::<f64>()).product::<f64>() * grid.cell_volume();
    let scale = mass / norm;
    for (i, o) in out.iter_mut().enumerate() {
        let idx = grid.multi_index(i);
        let w: f64 = (0..d).map(|a| profiles[a][idx[a]]).product();
        *o += scale * w;
    }
}

/// Normalized periodic Gaussian of width `h` at `x` (unit mass).
pub fn gaussian_bump(grid: &GridSpec, x: &[f64], h: f64, time: f64) -> ScalarField {
    let mut out = vec![0.0; grid.len()];
    add_gaussian(grid, x, h, 1.0, &mut out);
    ScalarField::from_parts(*grid, out, time)
}

/// One step from `state` with a drift frozen over the step.
pub fn advance_step(
    state: &ScalarField,
    b: &VectorField,
    forcing: &ScalarField,
    config: &SolverConfig,
) -> Result<ScalarField> {
    let grid = *state.grid();
    state.ensure_finite("state")?;
    forcing.ensure_finite("forcing")?;
    grid.ensure_same(forcing.grid())?;
    let integ = Integrator::new(&grid, config)?;
    let b = integ.check_drift(b)?;
    let uh = integ.sp.forward_real(state.samples());
    let fh = integ.sp.forward_real(forcing.samples());
    let drift = StageDrift::Given { start: b.clone(), end: b };
    let (out, _) = integ.step_coeffs(&uh, state.time(), config.dt, &drift, Some(&fh))?;
    Ok(ScalarField::from_parts(grid, integ.sp.inverse_real(&out), state.time() + config.dt))
}

fn step_count(span: f64, dt: f64) -> usize {
    ((span / dt) - 1e-9).ceil().max(1.0) as usize
}

fn run(
    u0: &ScalarField,
    drift: &DriftField,
    mu: &MeasureData,
    config: &SolverConfig,
    record_drift: bool,
) -> Result<TrajectoryStore> {
    let grid = *u0.grid();
    u0.ensure_finite("initial data")?;
    let integ = Integrator::new(&grid, config)?;
    let t_start = u0.time();
    if config.t_end <= t_start {
        return Err(Error::InvalidParameter("t_end must exceed the initial time".into()));
    }
    let steps = step_count(config.t_end - t_start, config.dt);
    let dt = (config.t_end - t_start) / steps as f64;
    let mut uh = integ.sp.forward_real(u0.samples());
    let mut snaps = vec![u0.clone()];
    let mut drifts = Vec::new();
    let drift_now = |uh: &[Complex64], t: f64| -> Result<VectorField> {
        match config.drift_mode {
            DriftMode::Sqg => Ok(integ.sp.biot_savart_from(&SpectralField::new(grid, uh.to_vec())?, t)),
            DriftMode::None => Ok(VectorField::zeros(grid, t)),
            DriftMode::Given => drift.at(&grid, t),
        }
    };
    if record_drift {
        drifts.push(drift_now(&uh, t_start)?);
    }
    for k in 0..steps {
        let t = t_start + k as f64 * dt;
        let stage = integ.stage_drift(drift, t, dt)?;
        let forcing = integ.forcing_coeffs(mu, t, dt)?;
        let (next, _) = integ.step_coeffs(&uh, t, dt, &stage, forcing.as_deref())?;
        uh = next;
        if (k + 1) % config.snapshot_stride == 0 || k + 1 == steps {
            let t_next = if k + 1 == steps { config.t_end } else { t_start + (k + 1) as f64 * dt };
            snaps.push(ScalarField::from_parts(grid, integ.sp.inverse_real(&uh), t_next));
            if record_drift {
                drifts.push(drift_now(&uh, t_next)?);
            }
        }
    }
    TrajectoryStore::new(snaps, record_drift.then_some(drifts))
}

/// Solves with a given (or no) drift from `u0.time()` to `config.t_end`.
pub fn solve(u0: &ScalarField, b: &DriftField, mu: &MeasureData, config: &SolverConfig) -> Result<TrajectoryStore> {
    if config.drift_mode == DriftMode::Sqg {
        return Err(Error::InvalidParameter("SQG coupling is handled by solve_sqg".into()));
    }
    let record = config.drift_mode == DriftMode::Given && !b.is_zero();
    run(u0, b, mu, config, record)
}

/// Solves at a list of increasing output times, hitting each exactly.
pub fn solve_at_times(
    u0: &ScalarField,
    b: &DriftField,
    mu: &MeasureData,
    config: &SolverConfig,
    times: &[f64],
) -> Result<Vec<ScalarField>> {
    let grid = *u0.grid();
    let integ = Integrator::new(&grid, config)?;
    let mut uh = integ.sp.forward_real(u0.samples());
    let mut t = u0.time();
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        if target < t {
            return Err(Error::InvalidParameter("output times must increase".into()));
        }
        if target > t {
            let steps = step_count(target - t, config.dt);
            let dt = (target - t) / steps as f64;
            for k in 0..steps {
                let tk = t + k as f64 * dt;
                let stage = integ.stage_drift(b, tk, dt)?;
                let forcing = integ.forcing_coeffs(mu, tk, dt)?;
                uh = integ.step_coeffs(&uh, tk, dt, &stage, forcing.as_deref())?.0;
            }
            t = target;
        }
        out.push(ScalarField::from_parts(grid, integ.sp.inverse_real(&uh), target));
    }
    Ok(out)
}

/// Dissipative SQG: `b = ∇^⊥(−Δ)^{−1/2} u` recomputed at every stage.
pub fn solve_sqg(u0: &ScalarField, mu: &MeasureData, config: &SolverConfig) -> Result<TrajectoryStore> {
    if u0.grid().dim() != 2 {
        return Err(Error::InvalidParameter("SQG requires d = 2".into()));
    }
    if (config.kernel.order() - 0.5).abs() > 1e-15 {
        return Err(Error::InvalidParameter("SQG requires s = 1/2".into()));
    }
    if config.drift_mode != DriftMode::Sqg {
        return Err(Error::InvalidParameter("solve_sqg needs drift_mode = sqg".into()));
    }
    run(u0, &DriftField::Zero, mu, config, true)
}

/// Solves `u` (with `μ`) and `v` (homogeneous, `v = u` outside `B_r(x₀)` after every step) in
/// lockstep on `I_r^⊖(t₀)`, starting both from `u(t₀ − r^{2s})`. In SQG mode `v` is advected by
/// the drift generated by `u`.
pub fn comparison_solve(
    u_traj: &TrajectoryStore,
    b: &DriftField,
    mu: &MeasureData,
    cylinder: &Cylinder,
    config: &SolverConfig,
) -> Result<ComparisonPair> {
    let grid = *u_traj.grid();
    cylinder.check_fits(&grid)?;
    if cylinder.r > grid.length() / 8.0 + 1e-12 {
        return Err(Error::Geometry(format!("comparison radius {} exceeds L/8 = {}", cylinder.r, grid.length() / 8.0)));
    }
    if (cylinder.s - config.kernel.order()).abs() > 1e-15 {
        return Err(Error::InvalidParameter("cylinder order differs from the kernel order".into()));
    }
    let t_start = cylinder.t_start();
    if !u_traj.covers(t_start, cylinder.t0) {
        return Err(Error::Geometry("cylinder not contained in the trajectory window".into()));
    }
    let integ = Integrator::new(&grid, config)?;
    let u0 = u_traj.at(t_start)?;
    let outside: Vec<bool> =
        (0..grid.len()).map(|i| grid.distance(&grid.point(i)[..grid.dim()], &cylinder.x0) >= cylinder.r).collect();
    let steps = step_count(cylinder.t0 - t_start, config.dt);
    let dt = (cylinder.t0 - t_start) / steps as f64;
    let mut uh = integ.sp.forward_real(u0.samples());
    let mut vh = uh.clone();
    let mut u_snaps = vec![u0.clone()];
    let mut v_snaps = vec![u0];
    for k in 0..steps {
        let t = t_start + k as f64 * dt;
        let stage = integ.stage_drift(b, t, dt)?;
        let forcing = integ.forcing_coeffs(mu, t, dt)?;
        let (u_next, used) = integ.step_coeffs(&uh, t, dt, &stage, forcing.as_deref())?;
        let v_stage = match used {
            Some(UsedDrift { start, end }) => StageDrift::Given { start, end },
            None => StageDrift::None,
        };
        let (v_next, _) = integ.step_coeffs(&vh, t, dt, &v_stage, None)?;
        let t_next = if k + 1 == steps { cylinder.t0 } else { t_start + (k + 1) as f64 * dt };
        let u_phys = integ.sp.inverse_real(&u_next);
        let mut v_phys = integ.sp.inverse_real(&v_next);
        for (i, v) in v_phys.iter_mut().enumerate() {
            if outside[i] {
                *v = u_phys[i];
            }
        }
        uh = integ.sp.forward_real(&u_phys);
        vh = integ.sp.forward_real(&v_phys);
        if (k + 1) % config.snapshot_stride == 0 || k + 1 == steps {
            u_snaps.push(ScalarField::from_parts(grid, u_phys, t_next));
            v_snaps.push(ScalarField::from_parts(grid, v_phys, t_next));
        }
    }
    Ok(ComparisonPair {
        u_traj: TrajectoryStore::new(u_snaps, None)?,
        v_traj: TrajectoryStore::new(v_snaps, None)?,
        cylinder: cylinder.clone(),
    })
}

/// Convenience: SQG drift of a field, exposed for drift bookkeeping.
pub fn sqg_drift(u: &ScalarField) -> Result<VectorField> {
    biot_savart_sqg(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::measure::Atom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid64() -> GridSpec {
        make_grid(2, 64, 2.0 * PI).unwrap()
    }

    fn config(s: f64, dt: f64, t_end: f64) -> SolverConfig {
        SolverConfig::new(KernelSpec::new(2, s).unwrap(), dt, t_end)
    }

    fn random_smooth(g: GridSpec, seed: u64, kmax: i32) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut terms = Vec::new();
        for k1 in -kmax..=kmax {
            for k2 in 0..=kmax {
                terms.push((k1 as f64, k2 as f64, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * PI)));
            }
        }
        ScalarField::from_fn(g, 0.0, |x| {
            terms.iter().map(|(a, b, c, p)| c * (a * x[0] + b * x[1] + p).cos()).sum::<f64>() / terms.len() as f64
        })
    }

    fn random_drift(g: GridSpec, seed: u64) -> VectorField {
        // b = ∇^⊥ψ for a random smooth stream function.
        let psi = random_smooth(g, seed, 3);
        let grad = Spectral::for_grid(&g).gradient(&psi);
        let bx = grad.component(1).scaled(-1.0);
        let by = grad.component(0).clone();
        let b = VectorField::new(vec![bx, by], true).unwrap();
        let scale = 1.0 / b.max_norm();
        b.scaled(scale)
    }

    #[test]
    fn eigenmode_step_is_exact() {
        let g = grid64();
        let u0 = ScalarField::from_fn(g, 0.0, |x| x[0].sin());
        let dt = 0.01;
        let c = config(0.5, dt, 1.0);
        let out = advance_step(&u0, &VectorField::zeros(g, 0.0), &ScalarField::zeros(g, 0.0), &c).unwrap();
        let want = u0.scaled((-dt).exp());
        assert!(out.max_diff(&want) < 1e-10);
    }

    #[test]
    fn constant_drift_transports_exactly() {
        let g = grid64();
        let u0 = ScalarField::from_fn(g, 0.0, |x| x[0].sin());
        let dt = 0.04;
        let c = config(0.5, dt, 1.0).with_drift_mode(DriftMode::Given).without_diffusion();
        let b = VectorField::constant(g, &[1.0, 0.0], 0.0);
        let out = advance_step(&u0, &b, &ScalarField::zeros(g, 0.0), &c).unwrap();
        let want = ScalarField::from_fn(g, dt, |x| (x[0] - dt).sin());
        assert!(out.max_diff(&want) < dt.powi(3));
    }

    #[test]
    fn constant_forcing_accumulates() {
        let g = grid64();
        let dt = 0.01;
        let c = config(0.5, dt, 1.0);
        let f = ScalarField::constant(g, 2.5, 0.0);
        let out = advance_step(&ScalarField::zeros(g, 0.0), &VectorField::zeros(g, 0.0), &f, &c).unwrap();
        assert!(out.samples().iter().all(|v| (v - 2.5 * dt).abs() < 1e-12));
    }

    #[test]
    fn cfl_violation_reports_admissible_step() {
        let g = grid64();
        let c = config(0.5, 0.5, 1.0).with_drift_mode(DriftMode::Given);
        let b = VectorField::from_fn(g, 0.0, true, |x| vec![x[1].cos(), 0.0]);
        let err = advance_step(&ScalarField::zeros(g, 0.0), &b, &ScalarField::zeros(g, 0.0), &c).unwrap_err();
        match err {
            Error::Cfl { admissible, .. } => assert!((admissible - 0.5 * g.spacing()).abs() < 1e-12),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn divergent_drift_is_refused_unless_projected() {
        let g = grid64();
        let b = VectorField::from_fn(g, 0.0, false, |x| vec![x[0].sin(), 0.0]);
        let u0 = ScalarField::from_fn(g, 0.0, |x| x[1].sin());
        let c = config(0.5, 0.01, 0.05).with_drift_mode(DriftMode::Given);
        let drift = DriftField::Steady(b);
        assert!(matches!(solve(&u0, &drift, &MeasureData::empty(), &c), Err(Error::NotDivergenceFree { .. })));
        let mut c = c;
        c.project_drift = true;
        assert!(solve(&u0, &drift, &MeasureData::empty(), &c).is_ok());
    }

    #[test]
    fn heat_flow_matches_exact_fourier_solution() {
        let g = grid64();
        for s in [0.5, 0.75] {
            let u0 = ScalarField::from_fn(g, 0.0, |x| x[0].sin() + (3.0 * x[1]).cos());
            let c = config(s, 1e-3, 1.0).with_stride(1000);
            let traj = solve(&u0, &DriftField::Zero, &MeasureData::empty(), &c).unwrap();
            let decay3 = (-(3f64.powf(2.0 * s))).exp();
            let want = ScalarField::from_fn(g, 1.0, |x| (-1f64).exp() * x[0].sin() + decay3 * (3.0 * x[1]).cos());
            let err = traj.last().max_diff(&want) / want.max_abs();
            assert!(err <= 1e-6, "s={s}: {err}");
            assert_eq!(traj.times(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn atom_mass_is_injected_and_conserved() {
        let g = grid64();
        let mu = MeasureData::from_atoms(vec![Atom::new(0.1, &[PI, PI], 1.0)]).unwrap();
        let b = DriftField::Steady(VectorField::from_fn(g, 0.0, true, |x| vec![x[1].cos(), 0.0]));
        let c = config(0.5, 0.01, 0.5).with_drift_mode(DriftMode::Given).with_stride(5);
        let traj = solve(&ScalarField::zeros(g, 0.0), &b, &mu, &c).unwrap();
        for s in traj.snapshots() {
            let mass = s.integral();
            if s.time() > 0.1 + 0.01 {
                assert!((mass - 1.0).abs() < 1e-8, "t={}: {mass}", s.time());
            } else if s.time() <= 0.1 - 1e-12 {
                assert!(mass.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_drift_conserves_mean_and_dissipates() {
        let g = grid64();
        let u0 = random_smooth(g, 5, 8);
        let b = DriftField::Steady(random_drift(g, 17));
        let c = config(0.5, 0.02, 1.0).with_drift_mode(DriftMode::Given).with_stride(5);
        let traj = solve(&u0, &b, &MeasureData::empty(), &c).unwrap();
        let m0 = u0.mean();
        for m in traj.means() {
            assert!((m - m0).abs() < 1e-10);
        }
        let norms = traj.l2_norms();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{norms:?}");
        }
        assert_eq!(traj.drift_snapshots().unwrap().len(), traj.len());
    }

    #[test]
    fn solution_is_linear_in_the_measure() {
        let g = grid64();
        let mu =
            MeasureData::from_atoms(vec![Atom::new(0.05, &[1.0, 2.0], 0.7), Atom::new(0.2, &[4.0, 4.0], 1.3)]).unwrap();
        let b = DriftField::Steady(random_drift(g, 3));
        let c = config(0.75, 0.02, 0.4).with_drift_mode(DriftMode::Given).with_stride(20);
        let zero = ScalarField::zeros(g, 0.0);
        let one = solve(&zero, &b, &mu, &c).unwrap();
        let two = solve(&zero, &b, &mu.scaled(2.0), &c).unwrap();
        let diff = two.last().max_diff(&one.last().scaled(2.0));
        assert!(diff <= 1e-10 * two.last().max_abs());
    }

    #[test]
    fn sqg_examples() {
        let g = grid64();
        let c = config(0.5, 0.01, 0.5).with_drift_mode(DriftMode::Sqg).with_stride(10);
        let traj = solve_sqg(&ScalarField::zeros(g, 0.0), &MeasureData::empty(), &c).unwrap();
        assert!(traj.snapshots().iter().all(|s| s.max_abs() == 0.0));
        assert!(traj.drift_sup().unwrap().iter().all(|&v| v == 0.0));

        let u0 = ScalarField::from_fn(g, 0.0, |x| x[0].sin());
        let c1 = config(0.5, 1e-3, 1.0).with_drift_mode(DriftMode::Sqg).with_stride(1000);
        let traj = solve_sqg(&u0, &MeasureData::empty(), &c1).unwrap();
        let want = u0.scaled((-1f64).exp());
        assert!(traj.last().max_diff(&want) < 1e-6);

        let u0 = random_smooth(g, 9, 6).scaled(2.0);
        let traj = solve_sqg(&u0, &MeasureData::empty(), &c).unwrap();
        let norms = traj.l2_norms();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        for m in traj.means() {
            assert!((m - u0.mean()).abs() < 1e-10);
        }
    }

    #[test]
    fn sqg_rejects_wrong_setting() {
        let g = grid64();
        let c = config(0.75, 0.01, 0.1).with_drift_mode(DriftMode::Sqg);
        assert!(solve_sqg(&ScalarField::zeros(g, 0.0), &MeasureData::empty(), &c).is_err());
    }

    #[test]
    fn forcing_normalization_and_linearity() {
        let g = grid64();
        let dt = 0.01;
        let one = MeasureData::from_atoms(vec![Atom::new(0.003, &[6.2, 0.05], 1.0)]).unwrap();
        let f = measure_forcing(&one, 0.0, dt, &g, 2.0 * g.spacing()).unwrap();
        assert!((f.integral() * dt - 1.0).abs() < 1e-10);
        let none = measure_forcing(&one, 0.5, dt, &g, 2.0 * g.spacing()).unwrap();
        assert_eq!(none.max_abs(), 0.0);
        let two =
            MeasureData::from_atoms(vec![Atom::new(0.003, &[6.2, 0.05], 1.0), Atom::new(0.007, &[6.2, 0.05], 1.0)])
                .unwrap();
        let f2 = measure_forcing(&two, 0.0, dt, &g, 2.0 * g.spacing()).unwrap();
        assert!(f2.max_diff(&f.scaled(2.0)) < 1e-9 * f2.max_abs());
        assert!(measure_forcing(&one, 0.0, dt, &g, 0.5 * g.spacing()).is_err());
    }

    fn base_run(mu: &MeasureData) -> (TrajectoryStore, DriftField, SolverConfig) {
        let g = grid64();
        let b = DriftField::Steady(VectorField::from_fn(g, 0.0, true, |x| vec![0.5 * x[1].cos(), 0.0]));
        let c = config(0.5, 0.01, 1.0).with_drift_mode(DriftMode::Given);
        let u0 = ScalarField::from_fn(g, 0.0, |x| x[0].sin() * x[1].cos());
        (solve(&u0, &b, mu, &c).unwrap(), b, c)
    }

    #[test]
    fn comparison_without_measure_is_trivial() {
        let mu = MeasureData::empty();
        let (traj, b, c) = base_run(&mu);
        let cyl = Cylinder::new(0.9, &[PI, PI], 0.5, 0.5).unwrap();
        let pair = comparison_solve(&traj, &b, &mu, &cyl, &c).unwrap();
        for (u, v) in pair.u_traj.snapshots().iter().zip(pair.v_traj.snapshots()) {
            assert!(u.max_diff(v) <= 1e-8);
        }
        assert!((pair.u_traj.start() - cyl.t_start()).abs() < 1e-12);
    }

    #[test]
    fn comparison_difference_is_linear_in_mass() {
        let cyl = Cylinder::new(0.9, &[PI, PI], 0.5, 0.5).unwrap();
        let mut lhs = Vec::new();
        for m in [0.5, 1.0, 2.0] {
            let mu = MeasureData::from_atoms(vec![Atom::new(0.6, &[PI + 0.1, PI], m)]).unwrap();
            let (traj, b, c) = base_run(&mu);
            let pair = comparison_solve(&traj, &b, &mu, &cyl, &c).unwrap();
            let g = *traj.grid();
            for (u, v) in pair.u_traj.snapshots().iter().zip(pair.v_traj.snapshots()) {
                for i in 0..g.len() {
                    if g.distance(&g.point(i)[..2], &cyl.x0) >= cyl.r {
                        assert_eq!(u.samples()[i], v.samples()[i]);
                    }
                }
            }
            let sup = pair
                .u_traj
                .snapshots()
                .iter()
                .zip(pair.v_traj.snapshots())
                .map(|(u, v)| u.max_diff(v))
                .fold(0.0, f64::max);
            lhs.push(sup / m);
        }
        assert!(lhs.iter().all(|v| (v / lhs[1] - 1.0).abs() < 1e-6), "{lhs:?}");
    }

    #[test]
    fn comparison_ignores_far_atoms() {
        let cyl = Cylinder::new(0.9, &[PI, PI], 0.5, 0.5).unwrap();
        let mu = MeasureData::from_atoms(vec![Atom::new(0.2, &[0.5, 0.5], 1.0)]).unwrap();
        let (traj, b, c) = base_run(&mu);
        let pair = comparison_solve(&traj, &b, &mu, &cyl, &c).unwrap();
        for (u, v) in pair.u_traj.snapshots().iter().zip(pair.v_traj.snapshots()) {
            assert!(u.max_diff(v) <= 1e-8);
        }
        let too_big = Cylinder::new(0.9, &[PI, PI], 1.0, 0.5).unwrap();
        assert!(comparison_solve(&traj, &b, &mu, &too_big, &c).is_err());
    }

    #[test]
    fn trajectory_interpolates_in_time() {
        let g = make_grid(2, 8, 1.0).unwrap();
        let a = ScalarField::constant(g, 1.0, 0.0);
        let b = ScalarField::constant(g, 3.0, 1.0);
        let traj = TrajectoryStore::new(vec![a, b], None).unwrap();
        assert!((traj.at(0.25).unwrap().samples()[0] - 1.5).abs() < 1e-15);
        assert!(traj.at(1.5).is_err());
        assert_eq!(traj.nearest(0.7), 1);
        assert!(TrajectoryStore::new(vec![ScalarField::zeros(g, 1.0), ScalarField::zeros(g, 0.0)], None).is_err());
    }
}
