//! Heat kernels `p(η, x; t, y)` of `∂t + (b, ∇·) + L`: estimation from mollified Dirac data,
//! the exact drift-free oracle, and checks of mass, on-diagonal decay, the semigroup property,
//! the upper bound and the gluing inequalities.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{gaussian_bump, solve_at_times, DriftField, DriftMode, SolverConfig};
use crate::field::ScalarField;
use crate::grid::{norm, GridSpec};
use crate::kernel::{normalization_constant, KernelSpec};
use crate::measure::MeasureData;
use crate::quadrature::{adaptive, bessel_j, gauss_legendre_integrate};
use crate::report::{ReportRow, VerificationReport};
use crate::spectral::Spectral;

/// Discretization of a kernel estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatKernelConfig {
    pub dt: f64,
    /// Width of the Gaussian standing in for `δ_y`; `None` selects two grid spacings.
    pub mollification_width: Option<f64>,
    /// Extrapolate `(4 p_{h/2} − p_h)/3` from a second solve at half the width.
    pub richardson: bool,
}

impl HeatKernelConfig {
    pub fn new(dt: f64) -> Self {
        Self { dt, mollification_width: None, richardson: true }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.mollification_width = Some(width);
        self
    }

    pub fn without_richardson(mut self) -> Self {
        self.richardson = false;
        self
    }

    pub fn width(&self, grid: &GridSpec) -> f64 {
        self.mollification_width.unwrap_or(2.0 * grid.spacing())
    }
}

/// `x ↦ p(η, x; t, y)` at a list of times.
#[derive(Debug, Clone)]
pub struct HeatKernelEstimate {
    pub eta: f64,
    pub y: Vec<f64>,
    pub times: Vec<f64>,
    /// Extrapolated fields (the raw field when extrapolation is off).
    pub fields: Vec<ScalarField>,
    /// Raw fields per mollification width, in the order of `mollification_widths`.
    pub raw: Vec<Vec<ScalarField>>,
    pub mollification_widths: Vec<f64>,
    pub kernel: KernelSpec,
    pub drift: DriftField,
    pub config: HeatKernelConfig,
}

impl HeatKernelEstimate {
    pub fn grid(&self) -> &GridSpec {
        self.fields[0].grid()
    }

    /// `p(η, y; t, y)`-centered distance `|x − y|` for every node.
    fn distances(&self) -> Vec<f64> {
        let g = *self.grid();
        (0..g.len()).map(|i| g.distance(&g.point(i)[..g.dim()], &self.y)).collect()
    }
}

fn solver_config(kernel: &KernelSpec, b: &DriftField, dt: f64, t_end: f64) -> SolverConfig {
    let mode = if b.is_zero() { DriftMode::None } else { DriftMode::Given };
    SolverConfig::new(*kernel, dt, t_end).with_drift_mode(mode)
}

/// Solves from `δ_y` at time `η` (a normalized Gaussian of the configured width) and records
/// the solution at `times`; optionally repeats at half the width and extrapolates.
pub fn estimate_kernel(
    b: &DriftField,
    kernel: &KernelSpec,
    grid: &GridSpec,
    eta: f64,
    y: &[f64],
    times: &[f64],
    config: &HeatKernelConfig,
) -> Result<HeatKernelEstimate> {
    grid.check_point(y)?;
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("evaluation times must be non-empty and increasing".into()));
    }
    let width = config.width(grid);
    let s = kernel.order();
    let minimum = eta + 4.0 * width.powf(2.0 * s);
    if times[0] < minimum {
        return Err(Error::TimesTooClose { minimum });
    }
    let widths = if config.richardson { vec![width, 0.5 * width] } else { vec![width] };
    let t_end = times[times.len() - 1];
    let sc = solver_config(kernel, b, config.dt, t_end);
    let raw = widths
        .iter()
        .map(|&w| {
            let u0 = gaussian_bump(grid, y, w, eta);
            solve_at_times(&u0, b, &MeasureData::empty(), &sc, times)
        })
        .collect::<Result<Vec<_>>>()?;
    let fields = if config.richardson {
        raw[0]
            .iter()
            .zip(&raw[1])
            .map(|(coarse, fine)| fine.zip_with(coarse, |f, c| (4.0 * f - c) / 3.0))
            .collect::<Result<Vec<_>>>()?
    } else {
        raw[0].clone()
    };
    Ok(HeatKernelEstimate {
        eta,
        y: y.to_vec(),
        times: times.to_vec(),
        fields,
        raw,
        mollification_widths: widths,
        kernel: *kernel,
        drift: b.clone(),
        config: *config,
    })
}

/// Drift-free kernel on `ℝ^d`: the Poisson kernel for `s = 1/2`, otherwise the radial Fourier
/// inversion of `e^{−t|k|^{2s}}` (Bessel `J₀` for `d = 2`, `sin(kr)/(kr)` for `d = 3`).
pub fn exact_free_kernel(kernel: &KernelSpec, t: f64, x: &[f64]) -> Result<f64> {
    let d = kernel.dim();
    let s = kernel.order();
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("kernel time {t} must be positive")));
    }
    if x.len() != d {
        return Err(Error::InvalidParameter("point has the wrong dimension".into()));
    }
    let r = norm(x);
    if (s - 0.5).abs() < 1e-15 {
        let c = match d {
            1 => 1.0 / PI,
            2 => 0.5 / PI,
            _ => 1.0 / (PI * PI),
        };
        return Ok(c * t / (t * t + r * r).powf(0.5 * (d as f64 + 1.0)));
    }
    let cutoff = (45.0 / t).powf(0.5 / s);
    let integrand = |k: f64| -> f64 {
        let decay = (-t * k.powf(2.0 * s)).exp();
        match d {
            1 => decay * (k * r).cos() / PI,
            2 => decay * bessel_j(0, k * r) * k / (2.0 * PI),
            _ => {
                let kr = k * r;
                let sinc = if kr < 1e-8 { 1.0 - kr * kr / 6.0 } else { kr.sin() / kr };
                decay * sinc * k * k / (2.0 * PI * PI)
            }
        }
    };
    let width = if r > 0.0 { (PI / r).min(cutoff / 32.0) } else { cutoff / 32.0 };
    let panels = (cutoff / width).ceil() as usize;
    let scale = t.powf(-(d as f64) / (2.0 * s));
    let abs_tol = 1e-13 * scale / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = p as f64 * width;
        let b = ((p + 1) as f64 * width).min(cutoff);
        total += adaptive(integrand, a, b, abs_tol, 1e-12, 400)?.0;
    }
    Ok(total)
}

/// `C^∞` step from 1 at `x ≤ 0` to 0 at `x ≥ 1`.
fn smooth_cutoff(x: f64) -> f64 {
    let psi = |v: f64| if v > 0.0 { (-1.0 / v).exp() } else { 0.0 };
    if x <= 0.0 {
        1.0
    } else if x >= 1.0 {
        0.0
    } else {
        psi(1.0 - x) / (psi(1.0 - x) + psi(x))
    }
}

/// The drift-free kernel on the torus: `Σ_m w(|x − y + Lm|) p(x − y + Lm)` over periodic images,
/// with `w` a smooth cutoff from 1 at `3L` to 0 at `12L`, plus the images under `1 − w` replaced
/// by their mean `L^{−d} ∫ (1 − w) p`. The smooth split makes the mean-field error negligible.
/// Beyond `12L` the mean uses the asymptote `p ~ t |x|^{−d−2s} / C(d, s)`.
pub fn periodized_free_kernel(kernel: &KernelSpec, grid: &GridSpec, t: f64, y: &[f64]) -> Result<ScalarField> {
    grid.check_point(y)?;
    let d = grid.dim();
    let s = kernel.order();
    let l = grid.length();
    let (inner, outer) = (3.0 * l, 12.0 * l);
    let images = 13i64;
    let r_max = outer + l * (d as f64).sqrt();
    // ln p tabulated against u = ln(1 + r/t); the closed form needs no table.
    let poisson = (s - 0.5).abs() < 1e-15;
    let table_len = 4096;
    let u_max = (1.0 + r_max / t).ln();
    let table: Vec<f64> = if poisson {
        Vec::new()
    } else {
        (0..table_len)
            .into_par_iter()
            .map(|j| {
                let r = t * ((u_max * j as f64 / (table_len - 1) as f64).exp() - 1.0);
                let mut x = vec![0.0; d];
                x[0] = r;
                Ok(exact_free_kernel(kernel, t, &x)?.max(f64::MIN_POSITIVE).ln())
            })
            .collect::<Result<Vec<_>>>()?
    };
    let radial = |r: f64| -> f64 {
        if poisson {
            let c = if d == 2 { 0.5 / PI } else { 1.0 / (PI * PI) };
            return c * t / (t * t + r * r).powf(0.5 * (d as f64 + 1.0));
        }
        let pos = (1.0 + r / t).ln() / u_max * (table_len - 1) as f64;
        let j = (pos.floor() as usize).min(table_len - 2);
        let f = pos - j as f64;
        ((1.0 - f) * table[j] + f * table[j + 1]).exp()
    };
    let weight = |r: f64| smooth_cutoff((r - inner) / (outer - inner));
    let c = normalization_constant(d, s)?;
    let area = crate::grid::sphere_area(d);
    let blend = gauss_legendre_integrate(|r| (1.0 - weight(r)) * radial(r) * r.powi(d as i32 - 1), inner, outer, 128);
    let beyond = t / c * outer.powf(-2.0 * s) / (2.0 * s);
    let far = area * (blend + beyond) / grid.volume();
    let side = (2 * images + 1) as usize;
    let samples: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let disp = grid.displacement(&grid.point(i)[..d], y);
            let mut acc = 0.0;
            for flat in 0..side.pow(d as u32) {
                let mut rem = flat;
                let mut r2 = 0.0;
                for a in 0..d {
                    let m = (rem % side) as i64 - images;
                    rem /= side;
                    let z = disp[a] + m as f64 * l;
                    r2 += z * z;
                }
                let r = r2.sqrt();
                if r < outer {
                    acc += weight(r) * radial(r);
                }
            }
            acc + far
        })
        .collect();
    ScalarField::new(*grid, samples, t)
}

fn window_mask(est: &HeatKernelEstimate) -> Vec<bool> {
    let quarter = 0.25 * est.grid().length();
    est.distances().iter().map(|&r| r <= quarter).collect()
}

/// Mass, on-diagonal decay and (given at least three times) semigroup checks.
///
/// The semigroup check propagates `z ↦ p(η, z; τ, y)`, sampled on every second node and
/// re-spread by Gaussians of the sampling width, from the middle time `τ` to the last time.
pub fn kernel_sanity(est: &HeatKernelEstimate) -> Result<VerificationReport> {
    let grid = *est.grid();
    let d = grid.dim() as f64;
    let s = est.kernel.order();
    let mut report = VerificationReport::new("heat_kernel_sanity");
    let mut worst_mass = 0.0f64;
    let mut diag = Vec::new();
    let mut floor = f64::INFINITY;
    for (t, p) in est.times.iter().zip(&est.fields) {
        let elapsed = t - est.eta;
        let mass = p.integral();
        worst_mass = worst_mass.max((mass - 1.0).abs());
        report.push(ReportRow::new("mass", (mass - 1.0).abs(), vec![1e-4]).with_point(*t, &est.y).with_ceiling(1.0));
        diag.push(p.max() * elapsed.powf(d / (2.0 * s)));
        floor = floor.min(p.min());
    }
    let c_diag = diag.iter().cloned().fold(0.0, f64::max);
    let c_low = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    report.metric("mass_error", worst_mass);
    report.metric("on_diagonal_c", c_diag);
    report.metric("on_diagonal_spread", c_diag / c_low);
    report.metric("min_value", floor);
    report.require(c_diag.is_finite(), "on-diagonal constant is not finite");
    if est.times.len() < 3 {
        report.note("semigroup check skipped: it needs at least three times");
        return Ok(report);
    }
    let mid = est.times.len() / 2;
    let (tau, t_last) = (est.times[mid], est.times[est.times.len() - 1]);
    let stride = 2usize;
    let sigma = stride as f64 * grid.spacing();
    let p_tau = &est.fields[mid];
    let mut sparse = vec![0.0; grid.len()];
    for (i, v) in sparse.iter_mut().enumerate() {
        if grid.multi_index(i)[..grid.dim()].iter().all(|m| m % stride == 0) {
            *v = p_tau.samples()[i] * (stride as f64).powf(d);
        }
    }
    // Σ_z w_z G_σ(x − z) through the Gaussian symbol.
    let sp = Spectral::for_grid(&grid);
    let mut coeffs = sp.forward_real(&sparse);
    for (i, c) in coeffs.iter_mut().enumerate() {
        let k = sp.wavenumbers()[i];
        *c *= Complex64::new((-0.5 * sigma * sigma * k * k).exp(), 0.0);
    }
    let spread = ScalarField::new(grid, sp.inverse_real(&coeffs), tau)?;
    let sc = solver_config(&est.kernel, &est.drift, est.config.dt, t_last);
    let composed = solve_at_times(&spread, &est.drift, &MeasureData::empty(), &sc, &[t_last])?;
    let direct = &est.fields[est.fields.len() - 1];
    let diff = composed[0].zip_with(direct, |a, b| a - b)?.l1_norm();
    let rel = diff / direct.l1_norm();
    report.metric("semigroup_l1_discrepancy", rel);
    report.metric("semigroup_z_stride", stride as f64);
    report.metric("semigroup_z_spacing", sigma);
    report.push(ReportRow::new("semigroup", rel, vec![0.02]).with_point(t_last, &est.y).with_ceiling(1.0));
    Ok(report)
}

/// Fits `c` in `p ≤ c (t − η) / (|x − y| + (t − η)^{1/(2s)})^{d+2s}` over `|x − y| ≤ L/4` at
/// every time. Metrics carry the overall maximum and a radial profile of the ratio.
pub fn upper_bound_check(est: &HeatKernelEstimate, t_max: f64, ceiling: Option<f64>) -> Result<VerificationReport> {
    if est.times.iter().any(|&t| t > t_max) {
        return Err(Error::InvalidParameter(format!("estimate extends beyond T = {t_max}")));
    }
    let grid = *est.grid();
    let d = grid.dim() as f64;
    let s = est.kernel.order();
    let dist = est.distances();
    let mask = window_mask(est);
    let bins = 16usize;
    let quarter = 0.25 * grid.length();
    let mut profile = vec![0.0f64; bins];
    let mut report = VerificationReport::new("heat_kernel_upper_bound");
    for (t, p) in est.times.iter().zip(&est.fields) {
        let elapsed = t - est.eta;
        let scale = elapsed.powf(0.5 / s);
        let mut best = (f64::NEG_INFINITY, 0.0, 1.0);
        for i in 0..grid.len() {
            if !mask[i] {
                continue;
            }
            let bound = elapsed / (dist[i] + scale).powf(d + 2.0 * s);
            let ratio = p.samples()[i] / bound;
            let bin = ((dist[i] / quarter * bins as f64) as usize).min(bins - 1);
            profile[bin] = profile[bin].max(ratio);
            if ratio > best.0 {
                best = (ratio, p.samples()[i], bound);
            }
        }
        let row = ReportRow::new("upper_bound", best.1, vec![best.2]).with_point(*t, &est.y);
        report.push(match ceiling {
            Some(c) => row.with_ceiling(c),
            None => row,
        });
    }
    report.metric("fitted_c", report.max_fitted());
    for (k, v) in profile.iter().enumerate() {
        report.metric(&format!("profile_{k:02}"), *v);
    }
    Ok(report)
}

/// Gluing inequalities `p ≤ p^ρ + c (t−η) ρ^{−d−2s}` and `p^ρ ≤ e^{C (t−η) ρ^{−2s}} p` for the
/// kernel truncated at each `ρ`. `C` is fitted where `p ≥ 10^{-3} max p`; both fits use the window
/// `|x − y| ≤ L/4` and a slack of `10^{-8}`.
#[allow(clippy::too_many_arguments)]
pub fn gluing_check(
    b: &DriftField,
    kernel: &KernelSpec,
    grid: &GridSpec,
    rhos: &[f64],
    eta: f64,
    y: &[f64],
    t: f64,
    config: &HeatKernelConfig,
) -> Result<VerificationReport> {
    let quarter = 0.25 * grid.length();
    if rhos.is_empty() || rhos.iter().any(|&r| !(r > 0.0 && r <= quarter * (1.0 + 1e-12))) {
        return Err(Error::InvalidParameter(format!("gluing radii must lie in (0, L/4 = {quarter}]")));
    }
    let d = grid.dim() as f64;
    let s = kernel.order();
    let elapsed = t - eta;
    let full = estimate_kernel(b, &kernel.without_truncation(), grid, eta, y, &[t], config)?;
    let p = &full.fields[0];
    let mask = window_mask(&full);
    let peak = p.max();
    let slack = 1e-8;
    let mut report = VerificationReport::new("gluing");
    let mut cs = Vec::new();
    let mut big_cs = Vec::new();
    for &rho in rhos {
        let truncated = estimate_kernel(b, &kernel.with_truncation(rho)?, grid, eta, y, &[t], config)?;
        let q = &truncated.fields[0];
        let mut excess = 0.0f64;
        let mut log_ratio = 0.0f64;
        let mut gap = 0.0f64;
        for i in 0..grid.len() {
            if !mask[i] {
                continue;
            }
            let (a, b) = (p.samples()[i], q.samples()[i]);
            excess = excess.max(a - b - slack);
            gap = gap.max((a - b).abs());
            if a >= 1e-3 * peak && b > 0.0 {
                log_ratio = log_ratio.max(((b - slack) / a).ln());
            }
        }
        let upper = ReportRow::new("gluing_upper", excess.max(0.0), vec![elapsed * rho.powf(-d - 2.0 * s)])
            .with_point(t, y)
            .with_radius(rho);
        let lower = ReportRow::new("gluing_lower", log_ratio.max(0.0), vec![elapsed * rho.powf(-2.0 * s)])
            .with_point(t, y)
            .with_radius(rho);
        cs.push(upper.fitted_constant);
        big_cs.push(lower.fitted_constant);
        report.metric(&format!("agreement_rho_{rho}"), gap / peak);
        report.metric(&format!("c_rho_{rho}"), upper.fitted_constant);
        report.metric(&format!("big_c_rho_{rho}"), lower.fitted_constant);
        report.push(upper);
        report.push(lower);
    }
    let spread = |v: &[f64]| {
        let hi = v.iter().cloned().fold(0.0, f64::max);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        if hi == 0.0 {
            1.0
        } else {
            hi / lo
        }
    };
    report.metric("c_spread", spread(&cs));
    report.metric("big_c_spread", spread(&big_cs));
    Ok(report)
}
