//! Finite space-time measures (atoms plus a gridded density), parabolic cylinders, slanted
//! cylinders and their masses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::geometry::ball_stencil;
use crate::grid::GridSpec;

/// Point mass `mass · δ_{(t, x)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub t: f64,
    pub x: Vec<f64>,
    pub mass: f64,
}

impl Atom {
    pub fn new(t: f64, x: &[f64], mass: f64) -> Self {
        Self { t, x: x.to_vec(), mass }
    }
}

/// Density `ρ(t, x)` given by frames at increasing times, linear in time between frames and
/// zero outside `[t_first, t_last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySeries {
    frames: Vec<ScalarField>,
}

impl DensitySeries {
    pub fn new(frames: Vec<ScalarField>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidParameter("a density needs at least two frames".into()));
        }
        for w in frames.windows(2) {
            w[0].grid().ensure_same(w[1].grid())?;
            if w[1].time() <= w[0].time() {
                return Err(Error::InvalidParameter("density frame times must increase".into()));
            }
        }
        for f in &frames {
            f.ensure_finite("density frame")?;
        }
        Ok(Self { frames })
    }

    /// Density constant in time on `[t_start, t_end]`.
    pub fn steady(field: &ScalarField, t_start: f64, t_end: f64) -> Result<Self> {
        Self::new(vec![field.clone().with_time(t_start), field.clone().with_time(t_end)])
    }

    pub fn grid(&self) -> &GridSpec {
        self.frames[0].grid()
    }

    pub fn frames(&self) -> &[ScalarField] {
        &self.frames
    }

    pub fn start(&self) -> f64 {
        self.frames[0].time()
    }

    pub fn end(&self) -> f64 {
        self.frames[self.frames.len() - 1].time()
    }

    /// Samples of `ρ(t, ·)`; zero outside the support in time.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let n = self.grid().len();
        if t < self.start() || t > self.end() {
            return vec![0.0; n];
        }
        let k = self.frames.partition_point(|f| f.time() <= t).clamp(1, self.frames.len() - 1);
        let (a, b) = (&self.frames[k - 1], &self.frames[k]);
        let theta = (t - a.time()) / (b.time() - a.time());
        a.samples().iter().zip(b.samples()).map(|(x, y)| (1.0 - theta) * x + theta * y).collect()
    }

    /// Exact `∫_{t1}^{t2} ρ(τ, ·) dτ` for the piecewise-linear series.
    pub fn time_integral(&self, t1: f64, t2: f64) -> Vec<f64> {
        let mut acc = vec![0.0; self.grid().len()];
        let (lo, hi) = (t1.max(self.start()), t2.min(self.end()));
        if hi <= lo {
            return acc;
        }
        let mut nodes = vec![lo];
        nodes.extend(self.frames.iter().map(|f| f.time()).filter(|&t| t > lo && t < hi));
        nodes.push(hi);
        for w in nodes.windows(2) {
            let (a, b) = (self.at(w[0]), self.at(w[1]));
            let half = 0.5 * (w[1] - w[0]);
            for ((acc, x), y) in acc.iter_mut().zip(&a).zip(&b) {
                *acc += half * (x + y);
            }
        }
        acc
    }

    /// `∫∫ |ρ| dx dt` by the trapezoid rule over frames.
    pub fn total_variation(&self) -> f64 {
        self.frames.windows(2).map(|w| 0.5 * (w[1].time() - w[0].time()) * (w[0].l1_norm() + w[1].l1_norm())).sum()
    }

    fn restricted(&self, t_min: f64, t_max: f64, keep: &dyn Fn(usize) -> bool) -> Option<Self> {
        let (lo, hi) = (t_min.max(self.start()), t_max.min(self.end()));
        if hi <= lo {
            return None;
        }
        let grid = *self.grid();
        let mut times = vec![lo];
        times.extend(self.frames.iter().map(|f| f.time()).filter(|&t| t > lo && t < hi));
        times.push(hi);
        let frames = times
            .iter()
            .map(|&t| {
                let mut s = self.at(t);
                for (i, v) in s.iter_mut().enumerate() {
                    if !keep(i) {
                        *v = 0.0;
                    }
                }
                ScalarField::from_parts(grid, s, t)
            })
            .collect();
        Some(Self { frames })
    }
}

/// Finite measure on space-time made of atoms and an optional density.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureData {
    atoms: Vec<Atom>,
    density: Option<DensitySeries>,
    total_mass: f64,
    resolution: Option<f64>,
}

impl MeasureData {
    pub fn new(atoms: Vec<Atom>, density: Option<DensitySeries>) -> Result<Self> {
        for a in &atoms {
            if !(a.t.is_finite() && a.mass.is_finite()) || a.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("atom"));
            }
            if let Some(rho) = &density {
                rho.grid().check_point(&a.x)?;
            }
        }
        let total_mass = atoms.iter().map(|a| a.mass.abs()).sum::<f64>()
            + density.as_ref().map_or(0.0, DensitySeries::total_variation);
        Ok(Self { atoms, density, total_mass, resolution: None })
    }

    pub fn empty() -> Self {
        Self { atoms: Vec::new(), density: None, total_mass: 0.0, resolution: None }
    }

    pub fn from_atoms(atoms: Vec<Atom>) -> Result<Self> {
        Self::new(atoms, None)
    }

    /// Records the spatial scale below which the measure is not resolved (mollification width).
    pub fn with_resolution(mut self, h: f64) -> Self {
        self.resolution = Some(h);
        self
    }

    pub fn resolution(&self) -> Option<f64> {
        self.resolution
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn density(&self) -> Option<&DensitySeries> {
        self.density.as_ref()
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn is_zero(&self) -> bool {
        self.total_mass == 0.0
    }

    /// `c · μ`.
    pub fn scaled(&self, c: f64) -> Self {
        let atoms = self.atoms.iter().map(|a| Atom { mass: c * a.mass, ..a.clone() }).collect();
        let density =
            self.density.as_ref().map(|d| DensitySeries { frames: d.frames.iter().map(|f| f.scaled(c)).collect() });
        Self { atoms, density, total_mass: c.abs() * self.total_mass, resolution: self.resolution }
    }

    /// `μ₁ + μ₂`; densities must share their frame times.
    pub fn sum(&self, other: &MeasureData) -> Result<Self> {
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().cloned());
        let density = match (&self.density, &other.density) {
            (None, None) => None,
            (Some(a), None) | (None, Some(a)) => Some(a.clone()),
            (Some(a), Some(b)) => {
                if a.frames.len() != b.frames.len() || a.frames.iter().zip(&b.frames).any(|(x, y)| x.time() != y.time())
                {
                    return Err(Error::InvalidParameter("density frame times differ".into()));
                }
                let frames = a
                    .frames
                    .iter()
                    .zip(&b.frames)
                    .map(|(x, y)| x.zip_with(y, |p, q| p + q))
                    .collect::<Result<Vec<_>>>()?;
                Some(DensitySeries::new(frames)?)
            }
        };
        let mut out = Self::new(atoms, density)?;
        out.resolution = match (self.resolution, other.resolution) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        Ok(out)
    }
}

/// Space-time window `[t_min, t_max) × Π [lower_a, upper_a)` used by [`restrict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub t_min: f64,
    pub t_max: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Window {
    pub fn everything(d: usize) -> Self {
        Self {
            t_min: f64::NEG_INFINITY,
            t_max: f64::INFINITY,
            lower: vec![f64::NEG_INFINITY; d],
            upper: vec![f64::INFINITY; d],
        }
    }

    fn contains_point(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| *v >= *lo && *v < *hi)
    }
}

/// Drops the parts of `mu` outside `window`.
pub fn restrict(mu: &MeasureData, window: &Window) -> MeasureData {
    let atoms = mu
        .atoms
        .iter()
        .filter(|a| a.t >= window.t_min && a.t < window.t_max && window.contains_point(&a.x))
        .cloned()
        .collect();
    let density = mu.density.as_ref().and_then(|rho| {
        let grid = *rho.grid();
        let keep = |i: usize| window.contains_point(&grid.point(i)[..grid.dim()]);
        rho.restricted(window.t_min, window.t_max, &keep)
    });
    let mut out = MeasureData::new(atoms, density).expect("restriction of a valid measure");
    out.resolution = mu.resolution;
    out
}

/// Backward parabolic cylinder `Q_r(t₀, x₀) = (t₀ − r^{2s}, t₀) × B_r(x₀)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub t0: f64,
    pub x0: Vec<f64>,
    pub r: f64,
    pub s: f64,
}

impl Cylinder {
    pub fn new(t0: f64, x0: &[f64], r: f64, s: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Geometry(format!("cylinder radius {r} must be positive")));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidParameter(format!("order s = {s} not in (0, 1)")));
        }
        Ok(Self { t0, x0: x0.to_vec(), r, s })
    }

    /// Time depth `r^{2s}`.
    pub fn depth(&self) -> f64 {
        self.r.powf(2.0 * self.s)
    }

    pub fn t_start(&self) -> f64 {
        self.t0 - self.depth()
    }

    /// Membership in the open interval `(t₀ − r^{2s}, t₀)`.
    pub fn contains_time(&self, t: f64) -> bool {
        t > self.t_start() && t < self.t0
    }

    pub fn with_radius(&self, r: f64) -> Result<Self> {
        Self::new(self.t0, &self.x0, r, self.s)
    }

    pub(crate) fn check_fits(&self, grid: &GridSpec) -> Result<()> {
        if self.x0.len() != grid.dim() {
            return Err(Error::Geometry("cylinder center has the wrong dimension".into()));
        }
        if self.r > 0.5 * grid.length() {
            return Err(Error::Geometry(format!(
                "cylinder radius {} exceeds half the torus length {}",
                self.r,
                0.5 * grid.length()
            )));
        }
        Ok(())
    }
}

/// Path `z_r` on `τ ∈ [−1, 0]` moving the ball of a slanted cylinder; stored as nodal values
/// and derivatives for Hermite interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlantPath {
    r: f64,
    s: f64,
    taus: Vec<f64>,
    z: Vec<Vec<f64>>,
    dz: Vec<Vec<f64>>,
    c1_norm: f64,
}

impl SlantPath {
    /// Builds a path from nodes `taus` (increasing, from −1 to 0) with values and derivatives.
    pub fn new(r: f64, s: f64, taus: Vec<f64>, z: Vec<Vec<f64>>, dz: Vec<Vec<f64>>) -> Result<Self> {
        let ok = taus.len() >= 2
            && taus.len() == z.len()
            && taus.len() == dz.len()
            && (taus[0] + 1.0).abs() < 1e-12
            && taus[taus.len() - 1].abs() < 1e-12
            && taus.windows(2).all(|w| w[1] > w[0]);
        if !ok {
            return Err(Error::InvalidParameter("slant path nodes must increase from -1 to 0".into()));
        }
        if z[z.len() - 1].iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidParameter("slant path must vanish at tau = 0".into()));
        }
        let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sup_z = z.iter().map(norm).fold(0.0, f64::max);
        let sup_dz = dz.iter().map(norm).fold(0.0, f64::max);
        Ok(Self { r, s, taus, z, dz, c1_norm: sup_z + sup_dz })
    }

    /// The trivial path `z ≡ 0`.
    pub fn zero(d: usize, r: f64, s: f64) -> Self {
        let zero = vec![0.0; d];
        Self {
            r,
            s,
            taus: vec![-1.0, 0.0],
            z: vec![zero.clone(), zero.clone()],
            dz: vec![zero.clone(), zero],
            c1_norm: 0.0,
        }
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn order(&self) -> f64 {
        self.s
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.z
    }

    pub fn derivatives(&self) -> &[Vec<f64>] {
        &self.dz
    }

    /// `sup |z_r| + sup |z_r'|` over the nodes.
    pub fn c1_norm(&self) -> f64 {
        self.c1_norm
    }

    pub fn is_zero(&self) -> bool {
        self.c1_norm == 0.0
    }

    /// `z_r(τ)` by cubic Hermite interpolation.
    pub fn position(&self, tau: f64) -> Result<Vec<f64>> {
        if !(-1.0 - 1e-9..=1e-9).contains(&tau) {
            return Err(Error::MissingDrift { t: tau });
        }
        let tau = tau.clamp(-1.0, 0.0);
        let k = self.taus.partition_point(|&v| v <= tau).clamp(1, self.taus.len() - 1);
        let (t0, t1) = (self.taus[k - 1], self.taus[k]);
        let h = t1 - t0;
        let u = (tau - t0) / h;
        let h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u);
        let h10 = u * (1.0 - u) * (1.0 - u);
        let h01 = u * u * (3.0 - 2.0 * u);
        let h11 = u * u * (u - 1.0);
        Ok((0..self.z[0].len())
            .map(|a| {
                h00 * self.z[k - 1][a] + h10 * h * self.dz[k - 1][a] + h01 * self.z[k][a] + h11 * h * self.dz[k][a]
            })
            .collect())
    }

    /// Translation `ρ · z(τ)` of a ball of radius `ρ` at absolute time `t`, with
    /// `τ = (t − t₀)/ρ^{2s}`.
    pub fn shift_for(&self, rho: f64, t0: f64, t: f64) -> Result<Vec<f64>> {
        if self.is_zero() {
            return Ok(vec![0.0; self.z[0].len()]);
        }
        let tau = (t - t0) / rho.powf(2.0 * self.s);
        Ok(self.position(tau)?.into_iter().map(|v| rho * v).collect())
    }
}

/// Source of ball translations for the slanted cylinders `Q̃_ρ`, one path per radius.
pub trait SlantFamily: Sync {
    /// Translation of the ball of `Q̃_ρ(t₀, ·)` at absolute time `t`.
    fn shift(&self, rho: f64, t0: f64, t: f64) -> Result<Vec<f64>>;

    /// True when every translation vanishes.
    fn is_trivial(&self) -> bool {
        false
    }
}

/// A single path used at every radius after parabolic rescaling.
impl SlantFamily for SlantPath {
    fn shift(&self, rho: f64, t0: f64, t: f64) -> Result<Vec<f64>> {
        self.shift_for(rho, t0, t)
    }

    fn is_trivial(&self) -> bool {
        self.is_zero()
    }
}

/// Cylinder whose spatial section at time `t` is `B_r(x₀ + r z_r(τ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlantedCylinder {
    pub base: Cylinder,
    pub path: SlantPath,
}

impl SlantedCylinder {
    pub fn new(base: Cylinder, path: SlantPath) -> Result<Self> {
        if (path.r - base.r).abs() > 1e-12 * base.r || (path.s - base.s).abs() > 1e-15 {
            return Err(Error::InvalidParameter("slant path scale does not match the cylinder".into()));
        }
        Ok(Self { base, path })
    }

    /// Ball center at time `t`.
    pub fn center_at(&self, t: f64) -> Result<Vec<f64>> {
        let shift = self.path.shift_for(self.base.r, self.base.t0, t)?;
        Ok(self.base.x0.iter().zip(&shift).map(|(a, b)| a + b).collect())
    }
}

/// Torus distance; atoms carry no grid, so the period is passed explicitly when known.
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

/// Geometry of a (possibly slanted or dilated) cylinder family used by the mass routines.
pub(crate) struct CylinderShape<'a> {
    pub t0: f64,
    pub x0: &'a [f64],
    pub depth: f64,
    pub ball_radius: f64,
    /// Translation at time `t`; `None` for straight cylinders.
    pub shift: Option<&'a dyn Fn(f64) -> Result<Vec<f64>>>,
}

impl CylinderShape<'_> {
    fn center(&self, t: f64) -> Result<Vec<f64>> {
        match self.shift {
            None => Ok(self.x0.to_vec()),
            Some(f) => Ok(self.x0.iter().zip(f(t)?).map(|(a, b)| a + b).collect()),
        }
    }

    pub fn contains_atom(&self, a: &Atom, period: Option<f64>) -> Result<bool> {
        if !(a.t > self.t0 - self.depth && a.t < self.t0) {
            return Ok(false);
        }
        let c = self.center(a.t)?;
        Ok(periodic_distance(&a.x, &c, period) < self.ball_radius)
    }

    /// `∫∫ |ρ|` over the shape: trapezoid in time over frame times and the interval ends,
    /// coverage quadrature in space.
    pub fn density_mass(&self, rho: &DensitySeries) -> Result<f64> {
        let (lo, hi) = ((self.t0 - self.depth).max(rho.start()), self.t0.min(rho.end()));
        if hi <= lo {
            return Ok(0.0);
        }
        let mut nodes = vec![lo];
        nodes.extend(rho.frames.iter().map(|f| f.time()).filter(|&t| t > lo && t < hi));
        nodes.push(hi);
        if self.shift.is_some() {
            // A moving ball is resolved by sub-dividing each frame interval.
            let mut fine = Vec::new();
            for w in nodes.windows(2) {
                let pieces = 8;
                for k in 0..pieces {
                    fine.push(w[0] + (w[1] - w[0]) * k as f64 / pieces as f64);
                }
            }
            fine.push(hi);
            nodes = fine;
        }
        let grid = rho.grid();
        let mut values = Vec::with_capacity(nodes.len());
        for &t in &nodes {
            let st = ball_stencil(grid, &self.center(t)?, self.ball_radius)?;
            values.push(st.integrate_with(&rho.at(t), f64::abs));
        }
        Ok(nodes.windows(2).zip(values.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum())
    }

    pub fn mass(&self, mu: &MeasureData) -> Result<f64> {
        let period = mu.density.as_ref().map(|d| d.grid().length());
        let mut total = 0.0;
        for a in &mu.atoms {
            if self.contains_atom(a, period)? {
                total += a.mass.abs();
            }
        }
        if let Some(rho) = &mu.density {
            total += self.density_mass(rho)?;
        }
        Ok(total)
    }
}

/// `|μ|(Q_r(t₀, x₀))` with open time interval and open ball.
pub fn cylinder_mass(mu: &MeasureData, q: &Cylinder) -> Result<f64> {
    if let Some(rho) = &mu.density {
        q.check_fits(rho.grid())?;
    }
    CylinderShape { t0: q.t0, x0: &q.x0, depth: q.depth(), ball_radius: q.r, shift: None }.mass(mu)
}

/// `|μ|(Q̃_r(t₀, x₀))` for the slanted cylinder.
pub fn slanted_cylinder_mass(mu: &MeasureData, qs: &SlantedCylinder) -> Result<f64> {
    let q = &qs.base;
    if let Some(rho) = &mu.density {
        q.check_fits(rho.grid())?;
    }
    if qs.path.is_zero() {
        return cylinder_mass(mu, q);
    }
    let shift = |t: f64| qs.path.shift_for(q.r, q.t0, t);
    CylinderShape { t0: q.t0, x0: &q.x0, depth: q.depth(), ball_radius: q.r, shift: Some(&shift) }.mass(mu)
}
