//! Nonlocal tails, parabolic Riesz potentials (straight, slanted and dilated), the slant ODE,
//! the excess functional, the localized energy form, the energy estimate and drift seminorms.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use once_cell::sync::Lazy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{DriftField, TrajectoryStore};
use crate::field::{ScalarField, VectorField};
use crate::geometry::{aligned_offsets, ball_stencil, interpolate, Ball};
use crate::grid::{norm, sphere_area, GridSpec, MAX_DIM};
use crate::kernel::KernelSpec;
use crate::measure::{Atom, Cylinder, CylinderShape, MeasureData, SlantFamily, SlantPath};
use crate::quadrature::{ball_average_symbol, gauss_legendre};
use crate::report::{ReportRow, VerificationReport};
use crate::spectral::Spectral;

// ---------------------------------------------------------------------------------------------
// Tails

/// Quadrature settings for `tail(v; x₀, r) = r^{2s} ∫_{|y−x₀|>r} |v(y)| |x₀−y|^{−d−2s} dy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailOptions {
    /// Order `s` of the kernel.
    pub order: f64,
    /// Outer radius `R_max ≤ L/2` of the annulus actually integrated.
    pub truncation_radius: f64,
    /// The radial range is split into `2^quadrature_order` logarithmic panels.
    pub quadrature_order: u32,
}

impl TailOptions {
    pub fn new(order: f64, truncation_radius: f64) -> Self {
        Self { order, truncation_radius, quadrature_order: 4 }
    }

    /// Truncation at half the torus length.
    pub fn for_grid(grid: &GridSpec, order: f64) -> Self {
        Self::new(order, 0.5 * grid.length())
    }

    pub fn with_order(mut self, quadrature_order: u32) -> Self {
        self.quadrature_order = quadrature_order;
        self
    }

    fn validate(&self, grid: &GridSpec, r: f64) -> Result<()> {
        if !(self.order > 0.0 && self.order < 1.0) {
            return Err(Error::InvalidParameter(format!("order s = {} not in (0, 1)", self.order)));
        }
        if self.truncation_radius > 0.5 * grid.length() * (1.0 + 1e-12) {
            return Err(Error::Geometry(format!(
                "truncation radius {} exceeds half the torus length",
                self.truncation_radius
            )));
        }
        if !(r > 0.0 && r < self.truncation_radius) {
            return Err(Error::Geometry(format!(
                "tail radius {r} must lie in (0, R_max = {})",
                self.truncation_radius
            )));
        }
        if self.quadrature_order > 12 {
            return Err(Error::InvalidParameter("quadrature order above 12".into()));
        }
        Ok(())
    }
}

/// A tail value with the truncation it was computed under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailValue {
    pub value: f64,
    pub truncation_radius: f64,
    /// Upper bound for the omitted part `|y − x₀| > R_max`, using `sup |v|`.
    pub remainder_bound: f64,
}

const RADIAL_GL: usize = 8;

/// Polar quadrature nodes (offsets from the center) and weights for the annulus, including
/// the factor `r^{2s} |y|^{−d−2s}`.
struct PolarRule {
    offsets: Vec<[f64; MAX_DIM]>,
    weights: Vec<f64>,
}

type RuleKey = (usize, usize, u64, u64, u64, u64, u32);
static POLAR: Lazy<Mutex<HashMap<RuleKey, Arc<PolarRule>>>> = Lazy::new(|| Mutex::new(HashMap::new()));

fn polar_rule(grid: &GridSpec, r: f64, opts: &TailOptions) -> Arc<PolarRule> {
    let big_r = opts.truncation_radius;
    let s = opts.order;
    let key = (
        grid.dim(),
        grid.n(),
        grid.length().to_bits(),
        r.to_bits(),
        big_r.to_bits(),
        s.to_bits(),
        opts.quadrature_order,
    );
    if let Some(rule) = POLAR.lock().expect("poisoned").get(&key) {
        return rule.clone();
    }
    let d = grid.dim();
    let h = grid.spacing();
    let panels = 1usize << opts.quadrature_order;
    let (gx, gw) = gauss_legendre(RADIAL_GL);
    let (lo, hi) = (r.ln(), big_r.ln());
    let du = (hi - lo) / panels as f64;
    // In u = ln ρ the radial weight is r^{2s} ρ^{−2s} du.
    let mut radial = Vec::with_capacity(panels * RADIAL_GL);
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * du;
        for (x, w) in gx.iter().zip(&gw) {
            let rho = (mid + 0.5 * du * x).exp();
            radial.push((rho, 0.5 * du * w * (r / rho).powf(2.0 * s)));
        }
    }
    let refine = (opts.quadrature_order as usize / 4).max(1);
    let mut directions: Vec<([f64; MAX_DIM], f64)> = Vec::new();
    if d == 2 {
        let m = ((4.0 * PI * big_r / h).ceil() as usize).max(16) * refine;
        for j in 0..m {
            let th = 2.0 * PI * (j as f64 + 0.5) / m as f64;
            directions.push(([th.cos(), th.sin(), 0.0], 2.0 * PI / m as f64));
        }
    } else {
        let m = ((2.0 * PI * big_r / h).ceil() as usize).max(8) * refine;
        let (cx, cw) = gauss_legendre(m);
        for (c, wc) in cx.iter().zip(&cw) {
            let sin = (1.0 - c * c).sqrt();
            for j in 0..2 * m {
                let ph = PI * (j as f64 + 0.5) / m as f64;
                directions.push(([sin * ph.cos(), sin * ph.sin(), *c], wc * PI / m as f64));
            }
        }
    }
    let mut offsets = Vec::with_capacity(radial.len() * directions.len());
    let mut weights = Vec::with_capacity(radial.len() * directions.len());
    for (rho, wr) in &radial {
        for (dir, wd) in &directions {
            let mut o = [0.0; MAX_DIM];
            for a in 0..d {
                o[a] = rho * dir[a];
            }
            offsets.push(o);
            weights.push(wr * wd);
        }
    }
    let rule = Arc::new(PolarRule { offsets, weights });
    POLAR.lock().expect("poisoned").insert(key, rule.clone());
    rule
}

/// `tail(|v − offset|; center, r)` from raw samples.
fn tail_samples(
    grid: &GridSpec,
    samples: &[f64],
    offset: f64,
    center: &[f64],
    r: f64,
    opts: &TailOptions,
) -> Result<TailValue> {
    opts.validate(grid, r)?;
    if center.len() != grid.dim() {
        return Err(Error::Geometry("tail center has the wrong dimension".into()));
    }
    let d = grid.dim();
    let rule = polar_rule(grid, r, opts);
    // Fixed chunks summed in order keep the result independent of the thread schedule.
    let partial: Vec<f64> = rule
        .offsets
        .par_chunks(4096)
        .zip(rule.weights.par_chunks(4096))
        .map(|(os, ws)| {
            let mut y = [0.0; MAX_DIM];
            os.iter()
                .zip(ws)
                .map(|(o, w)| {
                    for a in 0..d {
                        y[a] = center[a] + o[a];
                    }
                    w * (interpolate(grid, samples, &y[..d], 4) - offset).abs()
                })
                .sum::<f64>()
        })
        .collect();
    let value: f64 = partial.iter().sum();
    let s = opts.order;
    let sup = samples.iter().fold(0.0f64, |m, v| m.max((v - offset).abs()));
    let remainder_bound = sup * sphere_area(d) * (r / opts.truncation_radius).powf(2.0 * s) / (2.0 * s);
    Ok(TailValue { value, truncation_radius: opts.truncation_radius, remainder_bound })
}

/// Nonlocal tail of `v` outside `B_r(x₀)`, truncated at `opts.truncation_radius`.
pub fn tail(v: &ScalarField, x0: &[f64], r: f64, opts: &TailOptions) -> Result<f64> {
    Ok(tail_with_metadata(v, x0, r, opts)?.value)
}

/// [`tail`] together with the truncation radius and a bound on the omitted remainder.
pub fn tail_with_metadata(v: &ScalarField, x0: &[f64], r: f64, opts: &TailOptions) -> Result<TailValue> {
    v.ensure_finite("tail argument")?;
    tail_samples(v.grid(), v.samples(), 0.0, x0, r, opts)
}

/// Integration nodes on `[a, b]`: the ends plus the snapshot times strictly inside.
fn time_nodes(traj: &TrajectoryStore, a: f64, b: f64) -> Result<Vec<f64>> {
    if !(b > a) {
        return Err(Error::Geometry(format!("empty time interval ({a}, {b})")));
    }
    if !traj.covers(a, b) {
        return Err(Error::Geometry(format!(
            "interval ({a}, {b}) not covered by the trajectory [{}, {}]",
            traj.start(),
            traj.end()
        )));
    }
    let tol = 1e-9 * (b - a);
    let mut nodes = vec![a];
    nodes.extend(traj.times().iter().copied().filter(|&t| t > a + tol && t < b - tol));
    nodes.push(b);
    Ok(nodes)
}

fn trapezoid(nodes: &[f64], values: &[f64]) -> f64 {
    nodes.windows(2).zip(values.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// `(⨍ v^q dt)^{1/q}` by the trapezoid rule.
fn lq_mean(nodes: &[f64], values: &[f64], q: f64) -> f64 {
    let len = nodes[nodes.len() - 1] - nodes[0];
    let powered: Vec<f64> = values.iter().map(|v| v.abs().powf(q)).collect();
    (trapezoid(nodes, &powered) / len).powf(1.0 / q)
}

fn check_q(q: f64) -> Result<()> {
    if !(q.is_finite() && q > 1.0) {
        return Err(Error::InvalidParameter(format!("exponent q = {q} must exceed 1")));
    }
    Ok(())
}

/// `(⨍_{interval} tail(v(t); x₀, r)^q dt)^{1/q}` over the snapshots of `traj`.
pub fn tail_time_lq(
    traj: &TrajectoryStore,
    x0: &[f64],
    r: f64,
    q: f64,
    interval: (f64, f64),
    opts: &TailOptions,
) -> Result<f64> {
    check_q(q)?;
    let nodes = time_nodes(traj, interval.0, interval.1)?;
    let values = nodes.iter().map(|&t| tail(&traj.at(t)?, x0, r, opts)).collect::<Result<Vec<_>>>()?;
    Ok(lq_mean(&nodes, &values, q))
}

// ---------------------------------------------------------------------------------------------
// Parabolic potentials

/// Radial profile of a parabolic potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialProfile {
    /// Log-spaced radii in `[ρ_min, R]`.
    pub radii: Vec<f64>,
    /// `|μ|` of the cylinder at each radius.
    pub masses: Vec<f64>,
    /// `∫_{ρ_min}^R |μ|(Q_ρ) ρ^{−(d+2s−a)} dρ/ρ`, or `+∞` when divergent.
    pub value: f64,
    /// Set when an atom sits at the evaluation point itself.
    pub divergent: bool,
    pub rho_min: f64,
}

/// Discretization choices for [`riesz_potential`].
#[derive(Clone, Copy)]
pub struct PotentialOptions<'a> {
    /// Lower integration limit; defaults to half the measure resolution, else `10^{-6} R`.
    pub rho_min: Option<f64>,
    /// Radii used for the density part and the reported profile.
    pub radial_points: usize,
    /// Torus period for atom distances when the measure has no density grid.
    pub period: Option<f64>,
    /// Slanted cylinders `Q̃_ρ`; `None` for straight ones.
    pub slant: Option<&'a dyn SlantFamily>,
}

impl Default for PotentialOptions<'_> {
    fn default() -> Self {
        Self { rho_min: None, radial_points: 48, period: None, slant: None }
    }
}

impl<'a> PotentialOptions<'a> {
    pub fn with_slant(mut self, slant: &'a dyn SlantFamily) -> Self {
        self.slant = Some(slant);
        self
    }

    pub fn with_rho_min(mut self, rho_min: f64) -> Self {
        self.rho_min = Some(rho_min);
        self
    }

    pub fn with_period(mut self, period: f64) -> Self {
        self.period = Some(period);
        self
    }
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| if k == n - 1 { hi } else { (a + (b - a) * k as f64 / (n - 1) as f64).exp() }).collect()
}

fn bisect(mut a: f64, mut b: f64, state_a: bool, inside: &dyn Fn(f64) -> Result<bool>) -> Result<f64> {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if inside(m)? == state_a {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Maximal sub-intervals of `[lo, hi]` where `inside` holds: scan a log grid, bisect crossings.
fn membership_intervals(
    lo: f64,
    hi: f64,
    scan: usize,
    inside: &dyn Fn(f64) -> Result<bool>,
) -> Result<Vec<(f64, f64)>> {
    let radii = log_space(lo, hi, scan);
    let states = radii.iter().map(|&r| inside(r)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    let mut start = if states[0] { Some(lo) } else { None };
    for k in 1..radii.len() {
        if states[k] != states[k - 1] {
            let x = bisect(radii[k - 1], radii[k], states[k - 1], inside)?;
            if states[k] {
                start = Some(x);
            } else if let Some(a) = start.take() {
                out.push((a, x));
            }
        }
    }
    if let Some(a) = start {
        out.push((a, hi));
    }
    Ok(out)
}

fn periodic_distance(x: &[f64], y: &[f64], period: Option<f64>) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let mut d = a - b;
            if let Some(l) = period {
                d -= l * (d / l).round();
            }
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// A one-parameter family of cylinders `ρ ↦ (t₀ − ρ^{2s}, t₀) × B_{f(ρ)}(x₀ + shift_ρ(t))`.
struct CylinderFamily<'a> {
    t0: f64,
    x0: &'a [f64],
    s: f64,
    ball: &'a (dyn Fn(f64) -> f64 + Sync),
    slant: Option<&'a dyn SlantFamily>,
    period: Option<f64>,
}

impl CylinderFamily<'_> {
    fn contains(&self, a: &Atom, rho: f64) -> Result<bool> {
        if !(a.t > self.t0 - rho.powf(2.0 * self.s) && a.t < self.t0) {
            return Ok(false);
        }
        let dist = match self.slant {
            None => periodic_distance(&a.x, self.x0, self.period),
            Some(f) => {
                let shift = f.shift(rho, self.t0, a.t)?;
                let c: Vec<f64> = self.x0.iter().zip(&shift).map(|(x, z)| x + z).collect();
                periodic_distance(&a.x, &c, self.period)
            }
        };
        Ok(dist < (self.ball)(rho))
    }

    fn density_mass(&self, mu: &MeasureData, rho: f64) -> Result<f64> {
        let Some(series) = mu.density() else { return Ok(0.0) };
        let radius = (self.ball)(rho);
        if radius > 0.5 * series.grid().length() {
            return Err(Error::Geometry(format!("ball radius {radius} exceeds half the torus")));
        }
        let shift_fn;
        let shift: Option<&dyn Fn(f64) -> Result<Vec<f64>>> = match self.slant {
            Some(f) if !f.is_trivial() => {
                shift_fn = move |t: f64| f.shift(rho, self.t0, t);
                Some(&shift_fn)
            }
            _ => None,
        };
        CylinderShape { t0: self.t0, x0: self.x0, depth: rho.powf(2.0 * self.s), ball_radius: radius, shift }
            .density_mass(series)
    }

    /// `∫_{ρ_min}^R |μ|(Q_ρ) ρ^{−β} dρ/ρ`: atoms exactly between their crossing radii, the
    /// density by the trapezoid rule in `log ρ`.
    fn potential(
        &self,
        mu: &MeasureData,
        big_r: f64,
        beta: f64,
        rho_min: f64,
        points: usize,
    ) -> Result<PotentialProfile> {
        let radii = log_space(rho_min, big_r, points);
        for a in mu.atoms() {
            let at_point = (a.t - self.t0).abs() <= 1e-12 * self.t0.abs().max(1.0)
                && periodic_distance(&a.x, self.x0, self.period) <= 1e-12;
            if at_point && a.mass != 0.0 {
                return Ok(PotentialProfile {
                    masses: vec![a.mass.abs(); radii.len()],
                    radii,
                    value: f64::INFINITY,
                    divergent: true,
                    rho_min,
                });
            }
        }
        let scan = if self.slant.is_some() { 96 } else { 64 };
        let atom_parts = mu
            .atoms()
            .par_iter()
            .filter(|a| a.mass != 0.0)
            .map(|a| {
                let inside = |rho: f64| self.contains(a, rho);
                let spans = membership_intervals(rho_min, big_r, scan, &inside)?;
                let integral: f64 = spans.iter().map(|(lo, hi)| (lo.powf(-beta) - hi.powf(-beta)) / beta).sum();
                Ok(a.mass.abs() * integral)
            })
            .collect::<Result<Vec<f64>>>()?;
        let density_masses = radii.par_iter().map(|&rho| self.density_mass(mu, rho)).collect::<Result<Vec<f64>>>()?;
        let weighted: Vec<f64> = density_masses.iter().zip(&radii).map(|(m, rho)| m * rho.powf(-beta)).collect();
        let logs: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
        let value = atom_parts.iter().sum::<f64>() + trapezoid(&logs, &weighted);
        let masses = radii
            .iter()
            .zip(&density_masses)
            .map(|(&rho, dm)| {
                let mut m = *dm;
                for a in mu.atoms() {
                    if self.contains(a, rho)? {
                        m += a.mass.abs();
                    }
                }
                Ok(m)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(PotentialProfile { radii, masses, value, divergent: false, rho_min })
    }
}

fn default_rho_min(mu: &MeasureData, big_r: f64, opts: &PotentialOptions) -> f64 {
    opts.rho_min.or_else(|| mu.resolution().map(|h| 0.5 * h)).unwrap_or(1e-6 * big_r).min(0.5 * big_r)
}

fn period_of(mu: &MeasureData, opts: &PotentialOptions) -> Option<f64> {
    opts.period.or_else(|| mu.density().map(|d| d.grid().length()))
}

/// Parabolic Riesz potential `P^R_a[μ](t₀, x₀) = ∫_0^R |μ|(Q_ρ(t₀, x₀)) ρ^{−(d+2s−a)} dρ/ρ`,
/// with the integral started at `ρ_min`. With `opts.slant` the cylinders are the slanted `Q̃_ρ`.
pub fn riesz_potential(
    mu: &MeasureData,
    t0: f64,
    x0: &[f64],
    big_r: f64,
    kernel: &KernelSpec,
    a: f64,
    opts: &PotentialOptions,
) -> Result<PotentialProfile> {
    let d = kernel.dim();
    let s = kernel.order();
    if x0.len() != d {
        return Err(Error::Geometry("evaluation point has the wrong dimension".into()));
    }
    if !(a > 0.0 && a < d as f64 + 2.0 * s) {
        return Err(Error::InvalidParameter(format!("potential order a = {a} not in (0, d+2s)")));
    }
    let period = period_of(mu, opts);
    if !(big_r > 0.0) || period.is_some_and(|l| big_r > 0.5 * l) {
        return Err(Error::Geometry(format!("potential radius {big_r} must be in (0, L/2]")));
    }
    let rho_min = default_rho_min(mu, big_r, opts);
    let ball = |rho: f64| rho;
    let slant = opts.slant.filter(|f| !f.is_trivial());
    let family = CylinderFamily { t0, x0, s, ball: &ball, slant, period };
    family.potential(mu, big_r, d as f64 + 2.0 * s - a, rho_min, opts.radial_points)
}

/// Majorant of the slanted potential by straight cylinders with dilated balls:
/// `∫ |μ|(I_ρ^⊖(t₀) × B_{f(ρ)}(x₀)) ρ^{−d} dρ/ρ` with `f(ρ) = cρ(C₁ + C₂|log ρ|)`.
#[allow(clippy::too_many_arguments)]
pub fn slanted_potential_majorant(
    mu: &MeasureData,
    t0: f64,
    x0: &[f64],
    big_r: f64,
    s: f64,
    c1: f64,
    c2: f64,
    c: f64,
    opts: &PotentialOptions,
) -> Result<PotentialProfile> {
    if !(c1 > 0.0 && c2 >= 0.0 && c > 0.0) {
        return Err(Error::InvalidParameter("majorant needs C1 > 0, C2 ≥ 0, c > 0".into()));
    }
    let d = x0.len();
    let period = period_of(mu, opts);
    let ball = move |rho: f64| c * rho * (c1 + c2 * rho.ln().abs());
    let rho_min = default_rho_min(mu, big_r, opts);
    if let Some(l) = period {
        let widest = log_space(rho_min, big_r, 256).into_iter().map(ball).fold(0.0, f64::max);
        if widest > 0.5 * l {
            return Err(Error::Geometry(format!("dilated ball radius {widest} exceeds L/2")));
        }
    }
    let family = CylinderFamily { t0, x0, s, ball: &ball, slant: None, period };
    family.potential(mu, big_r, d as f64, rho_min, opts.radial_points)
}

// ---------------------------------------------------------------------------------------------
// Slant ODE

/// Ball averages of a drift at one time: Fourier coefficients already multiplied by the ball
/// symbol, pruned to the significant modes.
struct AveragedDrift {
    modes: Vec<([f64; MAX_DIM], Vec<Complex64>)>,
}

impl AveragedDrift {
    fn new(b: &VectorField, radius: f64) -> Self {
        let grid = b.grid();
        let d = grid.dim();
        let sp = Spectral::for_grid(grid);
        let coeffs: Vec<Vec<Complex64>> = (0..d).map(|a| sp.forward_real(b.component(a).samples())).collect();
        let peak = coeffs.iter().flatten().fold(0.0f64, |m, c| m.max(c.norm()));
        let mut modes = Vec::new();
        for i in 0..grid.len() {
            if coeffs.iter().all(|c| c[i].norm() <= 1e-15 * peak) {
                continue;
            }
            let k = sp.wavevector(i);
            let psi = ball_average_symbol(d, sp.wavenumbers()[i] * radius);
            let mut kv = [0.0; MAX_DIM];
            kv[..d].copy_from_slice(k);
            modes.push((kv, coeffs.iter().map(|c| c[i] * psi).collect()));
        }
        Self { modes }
    }

    /// `⨍_{B_radius(c)} b`.
    fn at(&self, c: &[f64]) -> Vec<f64> {
        let d = c.len();
        let mut out = vec![0.0; d];
        for (k, coeffs) in &self.modes {
            let phase: f64 = (0..d).map(|a| k[a] * c[a]).sum();
            let e = Complex64::new(phase.cos(), phase.sin());
            for a in 0..d {
                out[a] += (coeffs[a] * e).re;
            }
        }
        out
    }
}

fn integrate_slant(
    b: &DriftField,
    grid: &GridSpec,
    t0: f64,
    x0: &[f64],
    r: f64,
    s: f64,
    steps: usize,
) -> Result<SlantPath> {
    let d = grid.dim();
    if x0.len() != d {
        return Err(Error::Geometry("slant base point has the wrong dimension".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("slant ODE needs at least one step".into()));
    }
    let depth = r.powf(2.0 * s);
    let speed = r.powf(2.0 * s - 1.0);
    let steady = match b {
        DriftField::Zero => return Ok(SlantPath::zero(d, r, s)),
        DriftField::Steady(v) => Some(AveragedDrift::new(v, r)),
        _ => None,
    };
    let mut cache: HashMap<u64, AveragedDrift> = HashMap::new();
    let mut rhs = |tau: f64, z: &[f64]| -> Result<Vec<f64>> {
        let center: Vec<f64> = (0..d).map(|a| x0[a] + r * z[a]).collect();
        let avg = match &steady {
            Some(avg) => avg.at(&center),
            None => {
                let t = t0 + depth * tau;
                let key = t.to_bits();
                if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(key) {
                    e.insert(AveragedDrift::new(&b.at(grid, t)?, r));
                }
                cache[&key].at(&center)
            }
        };
        Ok(avg.into_iter().map(|v| speed * v).collect())
    };
    let dtau = 1.0 / steps as f64;
    let mut z = vec![0.0; d];
    let mut taus = vec![0.0];
    let mut values = vec![z.clone()];
    let mut slopes = vec![rhs(0.0, &z)?];
    for k in 0..steps {
        let tau = -(k as f64) * dtau;
        let h = -dtau;
        let k1 = rhs(tau, &z)?;
        let z2: Vec<f64> = (0..d).map(|a| z[a] + 0.5 * h * k1[a]).collect();
        let k2 = rhs(tau + 0.5 * h, &z2)?;
        let z3: Vec<f64> = (0..d).map(|a| z[a] + 0.5 * h * k2[a]).collect();
        let k3 = rhs(tau + 0.5 * h, &z3)?;
        let z4: Vec<f64> = (0..d).map(|a| z[a] + h * k3[a]).collect();
        let k4 = rhs(tau + h, &z4)?;
        for a in 0..d {
            z[a] += h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
        }
        let next = if k + 1 == steps { -1.0 } else { tau + h };
        taus.push(next);
        values.push(z.clone());
        slopes.push(rhs(next, &z)?);
    }
    taus.reverse();
    values.reverse();
    slopes.reverse();
    SlantPath::new(r, s, taus, values, slopes)
}

/// Solves `z_r'(τ) = r^{2s−1} ⨍_{B_r(x₀ + r z_r(τ))} b(t₀ + r^{2s} τ) dx`, `z_r(0) = 0`, backward
/// over `τ ∈ [−1, 0]` with RK4. For `s = 1/2` this is `z_r' = ⨍_{B_1} b(t₀ + rτ, x₀ + r x + r z_r)`.
/// Ball averages are taken exactly in Fourier space.
#[allow(clippy::too_many_arguments)]
pub fn slant_ode(
    b: &DriftField,
    grid: &GridSpec,
    t0: f64,
    x0: &[f64],
    r: f64,
    s: f64,
    steps: usize,
) -> Result<SlantPath> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidParameter(format!("slant scale r = {r} not in (0, 1]")));
    }
    integrate_slant(b, grid, t0, x0, r, s, steps)
}

/// Slanted cylinders built from a drift: each radius `ρ` gets its own path `z_ρ`.
pub struct DriftSlants {
    drift: DriftField,
    grid: GridSpec,
    x0: Vec<f64>,
    s: f64,
    steps: usize,
    cache: Mutex<HashMap<(u64, u64), Arc<SlantPath>>>,
}

impl DriftSlants {
    pub fn new(drift: DriftField, grid: GridSpec, x0: &[f64], s: f64, steps: usize) -> Self {
        Self { drift, grid, x0: x0.to_vec(), s, steps, cache: Mutex::new(HashMap::new()) }
    }

    /// The path `z_ρ` for cylinders with top time `t₀`.
    pub fn path(&self, rho: f64, t0: f64) -> Result<Arc<SlantPath>> {
        let key = (rho.to_bits(), t0.to_bits());
        if let Some(p) = self.cache.lock().expect("poisoned").get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(integrate_slant(&self.drift, &self.grid, t0, &self.x0, rho, self.s, self.steps)?);
        self.cache.lock().expect("poisoned").insert(key, p.clone());
        Ok(p)
    }
}

impl SlantFamily for DriftSlants {
    fn shift(&self, rho: f64, t0: f64, t: f64) -> Result<Vec<f64>> {
        self.path(rho, t0)?.shift_for(rho, t0, t)
    }

    fn is_trivial(&self) -> bool {
        self.drift.is_zero()
    }
}

// ---------------------------------------------------------------------------------------------
// Excess and oscillation

/// The two parts of the excess `E(u, t₀, x₀, r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessReport {
    pub interior: f64,
    pub tail_part: f64,
    pub total: f64,
    pub q: f64,
    pub cylinder: Cylinder,
}

fn centers(nodes: &[f64], x0: &[f64], r: f64, t0: f64, slant: Option<&SlantPath>) -> Result<Vec<Vec<f64>>> {
    nodes
        .iter()
        .map(|&t| match slant {
            Some(p) if !p.is_zero() => {
                if (p.r() - r).abs() > 1e-12 * r {
                    return Err(Error::InvalidParameter("slant path scale does not match r".into()));
                }
                let z = p.shift_for(r, t0, t)?;
                Ok(x0.iter().zip(&z).map(|(a, b)| a + b).collect())
            }
            _ => Ok(x0.to_vec()),
        })
        .collect()
}

/// Excess `E = (⨍_I [⨍_{B_r} |u − (u)_{Q_r}|]^q dt)^{1/q} + (⨍_I tail(u − (u)_{Q_r}; x₀, r)^q dt)^{1/q}`
/// on `Q_r(t₀, x₀)`; with a path, balls and tails follow `x₀ + r z_r`.
pub fn excess(
    traj: &TrajectoryStore,
    t0: f64,
    x0: &[f64],
    r: f64,
    q: f64,
    opts: &TailOptions,
    slant: Option<&SlantPath>,
) -> Result<ExcessReport> {
    check_q(q)?;
    let grid = *traj.grid();
    let cylinder = Cylinder::new(t0, x0, r, opts.order)?;
    cylinder.check_fits(&grid)?;
    let nodes = time_nodes(traj, cylinder.t_start(), t0)?;
    let cs = centers(&nodes, x0, r, t0, slant)?;
    let fields = nodes.iter().map(|&t| traj.at(t)).collect::<Result<Vec<_>>>()?;
    let stencils = cs.iter().map(|c| ball_stencil(&grid, c, r)).collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = fields.iter().zip(&stencils).map(|(f, st)| st.mean(f.samples())).collect();
    let mean = trapezoid(&nodes, &means) / cylinder.depth();
    let osc: Vec<f64> =
        fields.iter().zip(&stencils).map(|(f, st)| st.mean_with(f.samples(), |v| (v - mean).abs())).collect();
    let tails = fields
        .par_iter()
        .zip(cs.par_iter())
        .map(|(f, c)| Ok(tail_samples(&grid, f.samples(), mean, c, r, opts)?.value))
        .collect::<Result<Vec<f64>>>()?;
    let interior = lq_mean(&nodes, &osc, q);
    let tail_part = lq_mean(&nodes, &tails, q);
    Ok(ExcessReport { interior, tail_part, total: interior + tail_part, q, cylinder })
}

/// Ball samples and tails of a trajectory over the time slices of a (possibly slanted) cylinder,
/// from which `(⨍_Q |u|^q)^{1/q}` and `(⨍_I tail^q dt)^{1/q}` follow for any `q`.
#[derive(Debug, Clone)]
pub struct CylinderProfile {
    pub nodes: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    /// Tail of `u(t)` around the ball center at each node.
    pub tails: Vec<f64>,
    values: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    volumes: Vec<f64>,
}

impl CylinderProfile {
    /// `(⨍_I ⨍_{B(t)} |u|^q dx dt)^{1/q}`.
    pub fn lq_mean(&self, q: f64) -> f64 {
        let per_slice: Vec<f64> = self
            .values
            .iter()
            .zip(&self.weights)
            .zip(&self.volumes)
            .map(|((v, w), vol)| v.iter().zip(w).map(|(x, w)| w * x.abs().powf(q)).sum::<f64>() / vol)
            .collect();
        let len = self.nodes[self.nodes.len() - 1] - self.nodes[0];
        (trapezoid(&self.nodes, &per_slice) / len).powf(1.0 / q)
    }

    /// `⨍_I ⨍_{B(t)} |u| dx dt`.
    pub fn l1_mean(&self) -> f64 {
        self.lq_mean(1.0)
    }

    /// `(⨍_I tail^q dt)^{1/q}`.
    pub fn tail_lq(&self, q: f64) -> f64 {
        lq_mean(&self.nodes, &self.tails, q)
    }
}

/// Samples `Q_r(t₀, x₀)`, or its slanted version along `slant`, for [`CylinderProfile`].
pub fn cylinder_profile(
    traj: &TrajectoryStore,
    t0: f64,
    x0: &[f64],
    r: f64,
    opts: &TailOptions,
    slant: Option<&SlantPath>,
) -> Result<CylinderProfile> {
    let grid = *traj.grid();
    let cylinder = Cylinder::new(t0, x0, r, opts.order)?;
    cylinder.check_fits(&grid)?;
    let nodes = time_nodes(traj, cylinder.t_start(), t0)?;
    let cs = centers(&nodes, x0, r, t0, slant)?;
    let slices = nodes
        .par_iter()
        .zip(cs.par_iter())
        .map(|(&t, c)| {
            let f = traj.at(t)?;
            let st = ball_stencil(&grid, c, r)?;
            let values: Vec<f64> = st.indices().iter().map(|&i| f.samples()[i]).collect();
            let tail = tail_samples(&grid, f.samples(), 0.0, c, r, opts)?.value;
            Ok((values, st.weights().to_vec(), st.volume(), tail))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut profile = CylinderProfile {
        nodes,
        centers: cs,
        tails: Vec::new(),
        values: Vec::new(),
        weights: Vec::new(),
        volumes: Vec::new(),
    };
    for (v, w, vol, tail) in slices {
        profile.values.push(v);
        profile.weights.push(w);
        profile.volumes.push(vol);
        profile.tails.push(tail);
    }
    Ok(profile)
}

/// `sup − inf` of `u` over the closed cylinder, from the snapshots and the interval ends.
pub fn oscillation(
    traj: &TrajectoryStore,
    t0: f64,
    x0: &[f64],
    r: f64,
    s: f64,
    slant: Option<&SlantPath>,
) -> Result<f64> {
    let grid = *traj.grid();
    let cylinder = Cylinder::new(t0, x0, r, s)?;
    cylinder.check_fits(&grid)?;
    let nodes = time_nodes(traj, cylinder.t_start(), t0)?;
    let cs = centers(&nodes, x0, r, t0, slant)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (t, c) in nodes.iter().zip(&cs) {
        let f = traj.at(*t)?;
        let st = ball_stencil(&grid, c, r)?;
        for &i in st.indices() {
            lo = lo.min(f.samples()[i]);
            hi = hi.max(f.samples()[i]);
        }
    }
    Ok(hi - lo)
}

/// Least-squares fit of `y ≈ c x^α` in log-log coordinates; returns `(c, α)`.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("power-law fit needs at least two positive samples".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("power-law fit needs distinct abscissae".into()));
    }
    let alpha = sxy / sxx;
    Ok(((my - alpha * mx).exp(), alpha))
}

// ---------------------------------------------------------------------------------------------
// Energy form

/// `T(o) = ∫_{[−1,1]^d} Π_a (1 − |ζ_a|) |o + ζ|^{2−d−2s} dζ`: the pair integral of two unit
/// cells at integer offset `o` against `|x − y|^{2−d−2s}`.
fn pair_moment(d: usize, s: f64, o: &[i64]) -> f64 {
    let gamma = 2.0 - d as f64 - 2.0 * s;
    let mut total = 0.0;
    for cube in 0..(1usize << d) {
        // Axis a covers [−1, 0] (bit clear) or [0, 1] (bit set).
        let lower: Vec<f64> = (0..d).map(|a| if cube >> a & 1 == 1 { 0.0 } else { -1.0 }).collect();
        let singular: Vec<f64> = o.iter().map(|&v| -(v as f64)).collect();
        let at_vertex = (0..d).all(|a| singular[a] == lower[a] || singular[a] == lower[a] + 1.0);
        total += if at_vertex {
            duffy_cube(d, gamma, &lower, &singular)
        } else {
            let dist = (0..d)
                .map(|a| {
                    let p = singular[a];
                    (lower[a] - p).max(p - lower[a] - 1.0).max(0.0).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            let m = if dist < 2.0 {
                12
            } else if dist < 5.0 {
                6
            } else {
                3
            };
            tensor_cube(d, gamma, &lower, o, m)
        };
    }
    total
}

fn tent(z: f64) -> f64 {
    1.0 - z.abs()
}

fn tensor_cube(d: usize, gamma: f64, lower: &[f64], o: &[i64], m: usize) -> f64 {
    let (x, w) = gauss_legendre(m);
    let total = m.pow(d as u32);
    let mut acc = 0.0;
    for k in 0..total {
        let mut rem = k;
        let mut weight = 1.0;
        let mut r2 = 0.0;
        for a in 0..d {
            let j = rem % m;
            rem /= m;
            let z = lower[a] + 0.5 * (x[j] + 1.0);
            weight *= 0.5 * w[j] * tent(z);
            r2 += (o[a] as f64 + z).powi(2);
        }
        acc += weight * r2.powf(0.5 * gamma);
    }
    acc
}

/// Unit cube with the singularity at a vertex: pyramid (Duffy) split, radial integral exact.
fn duffy_cube(d: usize, gamma: f64, lower: &[f64], vertex: &[f64]) -> f64 {
    // ζ_a = v_a + σ_a ξ_a with ξ ∈ [0,1]^d; the tent factor is α_a + β_a ξ_a.
    let mut alpha = vec![0.0; d];
    let mut beta = vec![0.0; d];
    for a in 0..d {
        let sigma = if vertex[a] == lower[a] { 1.0 } else { -1.0 };
        let positive_half = lower[a] == 0.0;
        alpha[a] = tent(vertex[a]);
        beta[a] = if positive_half { -sigma } else { sigma };
    }
    let m = 12;
    let (x, w) = gauss_legendre(m);
    let mut total = 0.0;
    for k in 0..d {
        let others = d - 1;
        let count = m.pow(others as u32);
        for flat in 0..count {
            let mut u = vec![1.0; d];
            let mut weight = 1.0;
            let mut rem = flat;
            for a in (0..d).filter(|&a| a != k) {
                let j = rem % m;
                rem /= m;
                u[a] = 0.5 * (x[j] + 1.0);
                weight *= 0.5 * w[j];
            }
            // Π_a (α_a + β_a λ u_a) = Σ_j c_j λ^j.
            let mut poly = vec![1.0];
            for a in 0..d {
                let mut next = vec![0.0; poly.len() + 1];
                for (j, c) in poly.iter().enumerate() {
                    next[j] += c * alpha[a];
                    next[j + 1] += c * beta[a] * u[a];
                }
                poly = next;
            }
            let radial: f64 = poly.iter().enumerate().map(|(j, c)| c / (gamma + d as f64 + j as f64)).sum();
            total += weight * norm(&u).powf(gamma) * radial;
        }
    }
    total
}

type MomentKey = (usize, u64);
static MOMENTS: Lazy<Mutex<HashMap<MomentKey, HashMap<[i64; MAX_DIM], f64>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn canonical(o: &[i64]) -> [i64; MAX_DIM] {
    let mut c = [0i64; MAX_DIM];
    for (a, v) in o.iter().enumerate() {
        c[a] = v.abs();
    }
    c[..o.len()].sort_unstable();
    c
}

/// Pair moments for every offset in `[−reach, reach]^d`, computed once per canonical offset.
fn moment_table(d: usize, s: f64, reach: i64) -> Vec<f64> {
    let side = (2 * reach + 1) as usize;
    let count = side.pow(d as u32);
    let offset = |flat: usize| -> [i64; MAX_DIM] {
        let mut o = [0i64; MAX_DIM];
        let mut rem = flat;
        for a in (0..d).rev() {
            o[a] = (rem % side) as i64 - reach;
            rem /= side;
        }
        o
    };
    let key = (d, s.to_bits());
    let missing: Vec<[i64; MAX_DIM]> = {
        let cache = MOMENTS.lock().expect("poisoned");
        let known = cache.get(&key);
        let mut seen = std::collections::HashSet::new();
        (0..count)
            .map(|f| canonical(&offset(f)[..d]))
            .filter(|c| known.is_none_or(|k| !k.contains_key(c)) && seen.insert(*c))
            .collect()
    };
    let computed: Vec<([i64; MAX_DIM], f64)> = missing.par_iter().map(|c| (*c, pair_moment(d, s, &c[..d]))).collect();
    let mut cache = MOMENTS.lock().expect("poisoned");
    let table = cache.entry(key).or_default();
    table.extend(computed);
    (0..count).map(|f| table[&canonical(&offset(f)[..d])]).collect()
}

/// `E^s_B(w, w) = ∫_B ∫_B (w(x) − w(y))² |x − y|^{−d−2s} dy dx`.
///
/// Cell pairs use the local model `(w(x) − w(y))² ≈ (w_i − w_j)² |x − y|² / |x_i − x_j|²`,
/// integrated exactly against the kernel; a cell paired with itself uses `|∇w · (x − y)|²`
/// with a centered-difference gradient. Boundary cells enter with their covered fraction.
pub fn energy_form(w: &ScalarField, ball: &Ball, kernel: &KernelSpec) -> Result<f64> {
    w.ensure_finite("energy argument")?;
    let grid = *w.grid();
    let d = grid.dim();
    let s = kernel.order();
    let h = grid.spacing();
    let st = ball_stencil(&grid, &ball.center, ball.radius)?;
    let frac: Vec<f64> = st.weights().iter().map(|v| v / grid.cell_volume()).collect();
    let vals: Vec<f64> = st.indices().iter().map(|&i| w.samples()[i]).collect();
    let reach = st.offsets.iter().flat_map(|o| o[..d].iter().map(|v| v.abs())).max().unwrap_or(0) * 2;
    let table = moment_table(d, s, reach);
    let side = (2 * reach + 1) as usize;
    let slot = |o: &[i64]| -> usize { o.iter().fold(0usize, |acc, v| acc * side + (v + reach) as usize) };
    let pair_scale = h.powf(d as f64 - 2.0 * s);
    let n = vals.len();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            let mut o = [0i64; MAX_DIM];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dw = vals[i] - vals[j];
                if dw == 0.0 {
                    continue;
                }
                let mut o2 = 0i64;
                for a in 0..d {
                    o[a] = st.offsets[i][a] - st.offsets[j][a];
                    o2 += o[a] * o[a];
                }
                acc += frac[j] * dw * dw * table[slot(&o[..d])] / o2 as f64;
            }
            frac[i] * acc
        })
        .collect();
    let pairs: f64 = rows.iter().sum();
    let self_moment = table[slot(&[0; MAX_DIM][..d])];
    let self_scale = h.powf(d as f64 + 2.0 - 2.0 * s) * self_moment / d as f64;
    let mut selfs = 0.0;
    for (k, &i) in st.indices().iter().enumerate() {
        let idx = grid.multi_index(i);
        let mut g2 = 0.0;
        for a in 0..d {
            let mut up = [0i64; MAX_DIM];
            let mut down = [0i64; MAX_DIM];
            for b in 0..d {
                up[b] = idx[b] as i64;
                down[b] = idx[b] as i64;
            }
            up[a] += 1;
            down[a] -= 1;
            let g = (w.samples()[grid.flat_index_wrapped(&up[..d])] - w.samples()[grid.flat_index_wrapped(&down[..d])])
                / (2.0 * h);
            g2 += g * g;
        }
        selfs += frac[k] * frac[k] * g2;
    }
    Ok(pair_scale * pairs + self_scale * selfs)
}

/// Sign of the truncation `w_± = (u − l)_±`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    Plus,
    Minus,
}

impl Truncation {
    pub fn apply(&self, u: &ScalarField, level: f64) -> ScalarField {
        match self {
            Self::Plus => u.map(|v| (v - level).max(0.0)),
            Self::Minus => u.map(|v| (level - v).max(0.0)),
        }
    }
}

/// Geometry of the energy estimate: cylinder `Q_r(t₀, x₀)` enlarged by `ρ₁` in time and `ρ₂`
/// in space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyGeometry {
    pub t0: f64,
    pub r: f64,
    pub rho1: f64,
    pub rho2: f64,
}

/// Both sides of the energy estimate for `w_± = (u − l)_±`:
/// `sup_{I_r} ∫_{B_r} w² + ∫_{I_r} E_{B_r}(w)` against
/// `[ρ₂^{−2s} ∨ ((r+ρ₁)^{2s} − r^{2s})^{−1}] ∫_{I_{r+ρ₁}} ∫_{B_{r+ρ₂}} w²` and
/// `((r+ρ₂)/ρ₂)^d ρ₂^{−2s} ∫_{I_{r+ρ₁}} (∫_{B_{r+ρ₂}} w) tail(w; x₀, r+ρ₂) dt`.
/// `mu`, when given, must vanish on the enlarged cylinder.
#[allow(clippy::too_many_arguments)]
pub fn caccioppoli_check(
    traj: &TrajectoryStore,
    mu: Option<&MeasureData>,
    x0: &[f64],
    geometry: EnergyGeometry,
    level: f64,
    sign: Truncation,
    kernel: &KernelSpec,
    opts: &TailOptions,
) -> Result<VerificationReport> {
    let EnergyGeometry { t0, r, rho1, rho2 } = geometry;
    let grid = *traj.grid();
    let d = grid.dim() as f64;
    let s = kernel.order();
    if !(rho1 > 0.0 && rho1 <= r && rho2 > 0.0 && rho2 <= r) {
        return Err(Error::Geometry("energy estimate needs 0 < ρ₁, ρ₂ ≤ r".into()));
    }
    let outer_r = r + rho2;
    let outer_depth = (r + rho1).powf(2.0 * s);
    if let Some(mu) = mu {
        let q = CylinderShape { t0, x0, depth: outer_depth, ball_radius: outer_r, shift: None };
        if q.mass(mu)? > 0.0 {
            return Err(Error::InvalidParameter("measure charges the energy-estimate cylinder".into()));
        }
    }
    let inner_nodes = time_nodes(traj, t0 - r.powf(2.0 * s), t0)?;
    let outer_nodes = time_nodes(traj, t0 - outer_depth, t0)?;
    let inner_ball = ball_stencil(&grid, x0, r)?;
    let outer_ball = ball_stencil(&grid, x0, outer_r)?;
    let ball = Ball::new(x0, r);
    let inner = inner_nodes
        .par_iter()
        .map(|&t| {
            let w = sign.apply(&traj.at(t)?, level);
            let mass = inner_ball.integrate_with(w.samples(), |v| v * v);
            Ok((mass, energy_form(&w, &ball, kernel)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let sup_mass = inner.iter().map(|p| p.0).fold(0.0, f64::max);
    let energies: Vec<f64> = inner.iter().map(|p| p.1).collect();
    let lhs = sup_mass + trapezoid(&inner_nodes, &energies);
    let outer = outer_nodes
        .par_iter()
        .map(|&t| {
            let w = sign.apply(&traj.at(t)?, level);
            let sq = outer_ball.integrate_with(w.samples(), |v| v * v);
            let l1 = outer_ball.integrate(w.samples());
            let tl = if l1 > 0.0 { tail_samples(&grid, w.samples(), 0.0, x0, outer_r, opts)?.value } else { 0.0 };
            Ok((sq, l1 * tl))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let sq: Vec<f64> = outer.iter().map(|p| p.0).collect();
    let cross: Vec<f64> = outer.iter().map(|p| p.1).collect();
    let prefactor = rho2.powf(-2.0 * s).max(1.0 / (outer_depth - r.powf(2.0 * s)));
    let term1 = prefactor * trapezoid(&outer_nodes, &sq);
    let term2 = (outer_r / rho2).powf(d) * rho2.powf(-2.0 * s) * trapezoid(&outer_nodes, &cross);
    let mut report = VerificationReport::new("caccioppoli");
    report.push(ReportRow::new("caccioppoli", lhs, vec![term1, term2]).with_point(t0, x0).with_radius(r));
    report.metric("sup_mass", sup_mass);
    report.metric("energy_integral", lhs - sup_mass);
    Ok(report)
}

// ---------------------------------------------------------------------------------------------
// Drift seminorms

/// Estimates of the constants in `⨍_{B_1}|b| ≤ C₁` and `⨍_B |b − (b)_B| ≤ C₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmoEstimate {
    pub c1: f64,
    pub c2: f64,
}

fn center_stride(grid: &GridSpec) -> usize {
    (grid.n() / 64).max(1)
}

fn strided_centers(grid: &GridSpec) -> Vec<usize> {
    let stride = center_stride(grid);
    (0..grid.len()).filter(|&i| grid.multi_index(i)[..grid.dim()].iter().all(|v| v % stride == 0)).collect()
}

fn translated(grid: &GridSpec, offsets: &[[i64; MAX_DIM]], center: usize) -> Vec<usize> {
    let d = grid.dim();
    let base = grid.multi_index(center);
    let mut idx = [0i64; MAX_DIM];
    offsets
        .iter()
        .map(|o| {
            for a in 0..d {
                idx[a] = base[a] as i64 + o[a];
            }
            grid.flat_index_wrapped(&idx[..d])
        })
        .collect()
}

/// `C₁ = sup_x ⨍_{B_1(x)} |b|` and `C₂ = sup_{x, R ∈ scales} ⨍_{B_R(x)} |b − (b)_{B_R(x)}|`,
/// over grid-node centers (every `n/64`-th node per axis on fine grids).
pub fn bmo_seminorm(b: &VectorField, scales: &[f64]) -> Result<BmoEstimate> {
    let grid = *b.grid();
    let d = grid.dim();
    let magnitude = b.magnitude();
    let cs = strided_centers(&grid);
    let unit = aligned_offsets(&grid, 1.0)?;
    let unit_volume: f64 = unit.weights.iter().sum();
    let c1 = cs
        .par_iter()
        .map(|&c| {
            let idx = translated(&grid, &unit.offsets, c);
            idx.iter().zip(&unit.weights).map(|(&i, w)| w * magnitude.samples()[i]).sum::<f64>() / unit_volume
        })
        .reduce(|| 0.0, f64::max);
    let mut c2 = 0.0f64;
    for &radius in scales {
        if radius < grid.spacing() {
            return Err(Error::Geometry(format!("scale {radius} below the grid spacing")));
        }
        let st = aligned_offsets(&grid, radius)?;
        let volume: f64 = st.weights.iter().sum();
        let best = cs
            .par_iter()
            .map(|&c| {
                let idx = translated(&grid, &st.offsets, c);
                let mean: Vec<f64> = (0..d)
                    .map(|a| {
                        let comp = b.component(a).samples();
                        idx.iter().zip(&st.weights).map(|(&i, w)| w * comp[i]).sum::<f64>() / volume
                    })
                    .collect();
                idx.iter()
                    .zip(&st.weights)
                    .map(|(&i, w)| {
                        let dev: f64 = (0..d).map(|a| (b.component(a).samples()[i] - mean[a]).powi(2)).sum();
                        w * dev.sqrt()
                    })
                    .sum::<f64>()
                    / volume
            })
            .reduce(|| 0.0, f64::max);
        c2 = c2.max(best);
    }
    Ok(BmoEstimate { c1, c2 })
}

/// Smallest `C` with `sup_x (⨍_{B_R(x)} |b|^{d/s})^{s/d} ≤ C (1 − log₂ R)` over the radii.
pub fn john_nirenberg_constant(b: &VectorField, s: f64, radii: &[f64]) -> Result<f64> {
    let grid = *b.grid();
    let p = grid.dim() as f64 / s;
    let magnitude = b.magnitude();
    let cs = strided_centers(&grid);
    let mut best = 0.0f64;
    for &radius in radii {
        if radius > 1.0 {
            return Err(Error::InvalidParameter("John–Nirenberg radii must be at most 1".into()));
        }
        let st = aligned_offsets(&grid, radius)?;
        let volume: f64 = st.weights.iter().sum();
        let sup = cs
            .par_iter()
            .map(|&c| {
                let idx = translated(&grid, &st.offsets, c);
                let m = idx.iter().zip(&st.weights).map(|(&i, w)| w * magnitude.samples()[i].powf(p)).sum::<f64>();
                (m / volume).powf(1.0 / p)
            })
            .reduce(|| 0.0, f64::max);
        best = best.max(sup / (1.0 - radius.log2()));
    }
    Ok(best)
}
