//! The model jump kernel `K(x, y) = |x - y|^{-d-2s} / C(d, s)`, its Fourier multiplier and
//! the multiplier of the kernel truncated to `B_ρ`.
//!
//! With `C(d, s) = ∫ (1 - cos z₁) |z|^{-d-2s} dz` the full multiplier is exactly `|k|^{2s}`.
//! The truncated multiplier is `m_ρ(k) = ∫_{|z|<ρ} (1 - cos k·z) |z|^{-d-2s} dz`, which by
//! scaling equals `|k|^{2s} G(ρ|k|)` for the radial profile
//! `G(X) = |S^{d-1}| ∫_0^X r^{-1-2s} (1 - A_d(r)) dr`, `A_2 = J₀`, `A_3(r) = sin r / r`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::{sphere_area, GridSpec};
use crate::quadrature::{adaptive, bessel_j};
use crate::spectral::Spectral;

/// Relative error accepted from the radial quadrature before it is reported.
pub const QUADRATURE_RELATIVE_TOLERANCE: f64 = 1e-8;

/// Upper limit of the numerical part of the normalization integral.
const NORMALIZATION_CUTOFF: f64 = 2.0e4;

/// Order, ellipticity and optional truncation of the model kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    d: usize,
    s: f64,
    lambda: f64,
    normalization: f64,
    truncation_radius: Option<f64>,
}

impl KernelSpec {
    /// Model kernel of order `s ∈ (0, 1)` in dimension `d`; `Λ` is set to the value induced by
    /// the normalization, `max(C, 1/C)`.
    pub fn new(d: usize, s: f64) -> Result<Self> {
        if d != 2 && d != 3 {
            return Err(Error::InvalidParameter(format!("dimension {d} not in {{2, 3}}")));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidParameter(format!("order s = {s} not in (0, 1)")));
        }
        let normalization = normalization_constant(d, s)?;
        let lambda = normalization.max(1.0 / normalization);
        Ok(Self { d, s, lambda, normalization, truncation_radius: None })
    }

    /// Overrides `Λ`; it must dominate the induced value so condition (iii) keeps holding.
    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        let induced = self.normalization.max(1.0 / self.normalization);
        if !(lambda >= 1.0 && lambda >= induced * (1.0 - 1e-12)) {
            return Err(Error::InvalidParameter(format!(
                "lambda {lambda} must be >= 1 and >= the induced value {induced}"
            )));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn with_truncation(mut self, rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::InvalidParameter(format!("truncation radius {rho} must be > 0")));
        }
        self.truncation_radius = Some(rho);
        Ok(self)
    }

    pub fn without_truncation(mut self) -> Self {
        self.truncation_radius = None;
        self
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> f64 {
        self.s
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `C(d, s) = ∫ (1 - cos z₁) |z|^{-d-2s} dz`.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn truncation_radius(&self) -> Option<f64> {
        self.truncation_radius
    }

    /// Parabolic time depth of a cylinder of radius `r`, `r^{2s}`.
    pub fn time_depth(&self, r: f64) -> f64 {
        r.powf(2.0 * self.s)
    }
}

fn series_integral(d: usize, s: f64, a: f64) -> f64 {
    // ∫_0^a r^{-1-2s} (1 - A_d(r)) dr term by term; a ≤ 1 keeps the series short.
    let mut sum = 0.0;
    let mut coeff = 1.0;
    for j in 1..30 {
        let jf = j as f64;
        coeff *= match d {
            2 => 1.0 / (4.0 * jf * jf),
            _ => 1.0 / ((2.0 * jf) * (2.0 * jf + 1.0)),
        };
        let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
        let term = sign * coeff * a.powf(2.0 * jf - 2.0 * s) / (2.0 * jf - 2.0 * s);
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

fn oscillatory_part(d: usize, r: f64) -> f64 {
    match d {
        2 => bessel_j(0, r),
        _ => r.sin() / r,
    }
}

/// `∫_X^∞ r^{-1-2s} (1 - A_d(r)) dr` by integration by parts, accurate for large `X`.
fn far_tail(d: usize, s: f64, x: f64) -> f64 {
    let a = 1.0 + 2.0 * s;
    let smooth = x.powf(-2.0 * s) / (2.0 * s);
    let oscillatory = match d {
        2 => -bessel_j(1, x) * x.powf(-a) + (a + 1.0) * bessel_j(0, x) * x.powf(-a - 1.0),
        _ => x.cos() * x.powf(-a - 1.0) - (a + 1.0) * x.sin() * x.powf(-a - 2.0),
    };
    smooth - oscillatory
}

/// Radial profile `G(X)` at the sorted, nonnegative abscissae `xs`.
pub fn radial_profile(d: usize, s: f64, xs: &[f64]) -> Result<Vec<f64>> {
    let integrand = |r: f64| r.powf(-1.0 - 2.0 * s) * (1.0 - oscillatory_part(d, r));
    let area = sphere_area(d);
    let base = series_integral(d, s, 1.0);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = base;
    let mut err = 0.0;
    let mut last = 1.0;
    for &x in xs {
        debug_assert!(x >= 0.0);
        if x <= 1.0 {
            out.push(area * series_integral(d, s, x));
            continue;
        }
        if x > last {
            let panels = (x - last).ceil() as usize;
            let width = (x - last) / panels as f64;
            for p in 0..panels {
                let a = last + p as f64 * width;
                let b = if p + 1 == panels { x } else { a + width };
                let (v, e) = adaptive(integrand, a, b, 1e-15, 1e-13, 64)?;
                acc += v;
                err += e;
            }
            last = x;
        }
        if err > QUADRATURE_RELATIVE_TOLERANCE * acc {
            return Err(Error::Quadrature { value: area * acc, error: area * err });
        }
        out.push(area * acc);
    }
    Ok(out)
}

static NORMALIZATIONS: Lazy<Mutex<HashMap<(usize, u64), f64>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// `C(d, s)` computed once per `(d, s)` by radial quadrature plus an asymptotic far tail.
pub fn normalization_constant(d: usize, s: f64) -> Result<f64> {
    let key = (d, s.to_bits());
    if let Some(&c) = NORMALIZATIONS.lock().expect("poisoned").get(&key) {
        return Ok(c);
    }
    let near = radial_profile(d, s, &[NORMALIZATION_CUTOFF])?[0];
    let c = near + sphere_area(d) * far_tail(d, s, NORMALIZATION_CUTOFF);
    NORMALIZATIONS.lock().expect("poisoned").insert(key, c);
    Ok(c)
}

/// `m_ρ(k) = ∫_{|z|<ρ} (1 - cos k·z) |z|^{-d-2s} dz` (unnormalized).
pub fn truncated_multiplier(kernel: &KernelSpec, k: &[f64]) -> Result<f64> {
    let rho = kernel
        .truncation_radius
        .ok_or_else(|| Error::InvalidParameter("truncated multiplier needs a radius".into()))?;
    let kabs = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    if kabs == 0.0 {
        return Ok(0.0);
    }
    let g = radial_profile(kernel.d, kernel.s, &[rho * kabs])?[0];
    Ok(kabs.powf(2.0 * kernel.s) * g)
}

type TableKey = (usize, usize, u64, u64, u64);
static TABLES: Lazy<Mutex<HashMap<TableKey, Arc<Vec<f64>>>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// Per-mode symbol of the (possibly truncated) operator on a grid, normalized so that the
/// untruncated symbol is `|k|^{2s}`.
pub fn operator_symbol(kernel: &KernelSpec, grid: &GridSpec) -> Result<Arc<Vec<f64>>> {
    if kernel.d != grid.dim() {
        return Err(Error::InvalidParameter("kernel and grid dimensions differ".into()));
    }
    let key = (
        grid.dim(),
        grid.n(),
        grid.length().to_bits(),
        kernel.s.to_bits(),
        kernel.truncation_radius.map_or(0, f64::to_bits),
    );
    if let Some(t) = TABLES.lock().expect("poisoned").get(&key) {
        return Ok(t.clone());
    }
    let sp = Spectral::for_grid(grid);
    let kabs = sp.wavenumbers();
    let two_s = 2.0 * kernel.s;
    let table: Vec<f64> = match kernel.truncation_radius {
        None => kabs.iter().map(|&k| if k == 0.0 { 0.0 } else { k.powf(two_s) }).collect(),
        Some(rho) => {
            let mut order: Vec<usize> = (0..kabs.len()).collect();
            order.sort_by(|&a, &b| kabs[a].total_cmp(&kabs[b]));
            let mut unique: Vec<f64> = order.iter().map(|&i| kabs[i]).collect();
            unique.dedup();
            let xs: Vec<f64> = unique.iter().map(|k| rho * k).collect();
            let g = radial_profile(kernel.d, kernel.s, &xs)?;
            let lookup: HashMap<u64, f64> = unique
                .iter()
                .zip(&g)
                .map(|(k, gv)| (k.to_bits(), if *k == 0.0 { 0.0 } else { k.powf(two_s) * gv }))
                .collect();
            kabs.iter().map(|k| lookup[&k.to_bits()] / kernel.normalization).collect()
        }
    };
    let table = Arc::new(table);
    TABLES.lock().expect("poisoned").insert(key, table.clone());
    Ok(table)
}

/// Applies `𝓛^ρ` as the multiplier `m_ρ(k) / C(d, s)`.
pub fn apply_truncated_operator(f: &ScalarField, kernel: &KernelSpec) -> Result<ScalarField> {
    if kernel.truncation_radius.is_none() {
        return Err(Error::InvalidParameter("kernel has no truncation radius".into()));
    }
    f.ensure_finite("truncated operator input")?;
    let symbol = operator_symbol(kernel, f.grid())?;
    let sp = Spectral::for_grid(f.grid());
    Ok(sp.apply_multiplier(f, |i| symbol[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::spectral::apply_fractional_laplacian;
    use statrs::function::gamma::gamma;
    use std::f64::consts::PI;

    fn closed_form_normalization(d: usize, s: f64) -> f64 {
        // π^{d/2} |Γ(-s)| / (4^s Γ(d/2 + s)), with Γ(-s) = Γ(1-s)/(-s).
        let gamma_neg = gamma(1.0 - s) / s;
        PI.powf(d as f64 / 2.0) * gamma_neg / (4f64.powf(s) * gamma(d as f64 / 2.0 + s))
    }

    #[test]
    fn normalization_matches_gamma_formula() {
        for d in [2, 3] {
            for s in [0.1, 0.25, 0.5, 0.75, 0.9] {
                let c = normalization_constant(d, s).unwrap();
                let want = closed_form_normalization(d, s);
                assert!((c - want).abs() < 1e-9 * want, "d={d} s={s}: {c} vs {want}");
            }
        }
        assert!((normalization_constant(2, 0.5).unwrap() - 2.0 * PI).abs() < 1e-8);
    }

    #[test]
    fn truncated_multiplier_basics() {
        let k = KernelSpec::new(2, 0.5).unwrap().with_truncation(1.0).unwrap();
        assert_eq!(truncated_multiplier(&k, &[0.0, 0.0]).unwrap(), 0.0);
        let mut last = 0.0;
        for rho in [1.0, 2.0, 4.0, 8.0] {
            let k = k.with_truncation(rho).unwrap();
            let m = truncated_multiplier(&k, &[0.6, 0.8]).unwrap();
            assert!(m >= last && m >= 0.0);
            last = m;
        }
    }

    #[test]
    fn truncated_multiplier_requires_radius() {
        let k = KernelSpec::new(2, 0.5).unwrap();
        assert!(truncated_multiplier(&k, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn truncated_multiplier_matches_brute_force_polar_sum() {
        // Midpoint rule in (r, θ) applied directly to (1 - cos(r cos θ)) r^{-2}, an independent
        // route that never evaluates a Bessel function. Doubled resolution bounds its error.
        fn brute(rho: f64, nr: usize, nt: usize) -> f64 {
            let mut acc = 0.0;
            // Inner core on [0, r0]: (1 - cos(r cos θ)) ≈ r² cos²θ / 2 integrates to π r0 / 2.
            let r0 = 1e-3;
            acc += 0.5 * PI * r0;
            let dr = (rho - r0) / nr as f64;
            let dt = 2.0 * PI / nt as f64;
            for i in 0..nr {
                let r = r0 + (i as f64 + 0.5) * dr;
                let mut inner = 0.0;
                for j in 0..nt {
                    let th = (j as f64 + 0.5) * dt;
                    inner += 1.0 - (r * th.cos()).cos();
                }
                acc += inner * dt * r.powi(-2) * dr;
            }
            acc
        }
        let k = KernelSpec::new(2, 0.5).unwrap().with_truncation(100.0).unwrap();
        let m = truncated_multiplier(&k, &[1.0, 0.0]).unwrap();
        let coarse = brute(100.0, 50_000, 256);
        let fine = brute(100.0, 100_000, 512);
        assert!((coarse - fine).abs() < 1e-5 * fine);
        assert!((m - fine).abs() < 1e-4 * fine, "{m} vs {fine}");
        let full = k.normalization();
        assert!((full - m) / full < 0.01);
    }

    #[test]
    fn truncated_operator_recovers_full_operator() {
        let g = make_grid(2, 64, 2.0 * PI).unwrap();
        let kernel = KernelSpec::new(2, 0.5).unwrap();
        let tk = kernel.with_truncation(64.0).unwrap();
        let u = ScalarField::from_fn(g, 0.0, |x| x[0].sin());
        let full = apply_fractional_laplacian(&u, &kernel).unwrap();
        let trunc = apply_truncated_operator(&u, &tk).unwrap();
        let ratio = truncated_multiplier(&tk, &[1.0, 0.0]).unwrap() / tk.normalization();
        assert!((1.0 - ratio).abs() < 0.02);
        let expected = full.scaled(ratio);
        assert!(trunc.max_diff(&expected) <= 1e-12);

        let c = ScalarField::constant(g, 1.5, 0.0);
        assert!(apply_truncated_operator(&c, &tk).unwrap().max_abs() < 1e-14);

        let tk = kernel.with_truncation(1.0).unwrap();
        let a = ScalarField::from_fn(g, 0.0, |x| x[0].sin());
        let b = ScalarField::from_fn(g, 0.0, |x| (3.0 * x[1]).cos());
        let sum = a.zip_with(&b, |x, y| 2.0 * x + y).unwrap();
        let lhs = apply_truncated_operator(&sum, &tk).unwrap();
        let la = apply_truncated_operator(&a, &tk).unwrap();
        let lb = apply_truncated_operator(&b, &tk).unwrap();
        let rhs = la.zip_with(&lb, |x, y| 2.0 * x + y).unwrap();
        assert!(lhs.max_diff(&rhs) < 1e-12);
    }
}
