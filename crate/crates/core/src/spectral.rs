//! Fourier representation of periodic fields and the spectral operators built on it.
//!
//! Coefficients are normalized so that `f(x) = Σ_m c_m e^{i k·x}` with `k = (2π/L) m`;
//! the zero mode is therefore the spatial mean and `‖f‖²_{L²} = L^d Σ |c_m|²`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use once_cell::sync::Lazy;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::{GridSpec, MAX_DIM};
use crate::kernel::KernelSpec;

/// Relative threshold for the divergence-free assertion.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-10;

/// Fourier coefficients of a field on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: GridSpec,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn new(grid: GridSpec, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} coefficients for a grid of {} points",
                coeffs.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Coefficient of the integer wavevector `m` (components wrapped into `[-n/2, n/2)`).
    pub fn coefficient(&self, m: &[i64]) -> Complex64 {
        self.coeffs[self.grid.flat_index_wrapped(m)]
    }

    /// `‖f‖_{L²}` via Parseval.
    pub fn l2_norm(&self) -> f64 {
        (self.grid.volume() * self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>()).sqrt()
    }

    /// Multiplies every coefficient by a real function of the flat index.
    pub fn scale_by(&mut self, f: impl Fn(usize) -> f64) {
        for (i, c) in self.coeffs.iter_mut().enumerate() {
            *c *= f(i);
        }
    }
}

/// FFT plans and wavevector tables for one grid.
pub struct Spectral {
    grid: GridSpec,
    forward: Arc<dyn Fft<f64>>,
    backward: Arc<dyn Fft<f64>>,
    /// Physical wavevectors.
    k: Vec<[f64; MAX_DIM]>,
    /// Wavevectors used for odd derivatives: Nyquist components are zeroed.
    k_odd: Vec<[f64; MAX_DIM]>,
    k_abs: Vec<f64>,
}

static CACHE: Lazy<Mutex<HashMap<(usize, usize, u64), Arc<Spectral>>>> = Lazy::new(|| Mutex::new(HashMap::new()));

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid.n());
        let backward = planner.plan_fft_inverse(grid.n());
        let d = grid.dim();
        let half = (grid.n() / 2) as i64;
        let mut k = Vec::with_capacity(grid.len());
        let mut k_odd = Vec::with_capacity(grid.len());
        let mut k_abs = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let kv = grid.wavevector(i);
            let m = grid.modes(i);
            let mut ko = kv;
            for a in 0..d {
                if m[a] == -half {
                    ko[a] = 0.0;
                }
            }
            k_abs.push(kv[..d].iter().map(|x| x * x).sum::<f64>().sqrt());
            k.push(kv);
            k_odd.push(ko);
        }
        Self { grid, forward, backward, k, k_odd, k_abs }
    }

    /// Shared, cached instance for a grid.
    pub fn for_grid(grid: &GridSpec) -> Arc<Spectral> {
        let key = (grid.dim(), grid.n(), grid.length().to_bits());
        let mut cache = CACHE.lock().expect("spectral cache poisoned");
        cache.entry(key).or_insert_with(|| Arc::new(Spectral::new(*grid))).clone()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn wavevector(&self, i: usize) -> &[f64] {
        &self.k[i][..self.grid.dim()]
    }

    pub fn derivative_wavevector(&self, i: usize) -> &[f64] {
        &self.k_odd[i][..self.grid.dim()]
    }

    /// `|k|` for every flat index.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.k_abs
    }

    pub fn forward(&self, f: &ScalarField) -> SpectralField {
        SpectralField { grid: self.grid, coeffs: self.forward_real(f.samples()) }
    }

    pub fn forward_real(&self, samples: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, false);
        let scale = 1.0 / self.grid.len() as f64;
        data.iter_mut().for_each(|c| *c *= scale);
        data
    }

    /// Inverse transform, keeping the real part.
    pub fn inverse(&self, f: &SpectralField, time: f64) -> ScalarField {
        ScalarField::from_parts(self.grid, self.inverse_real(f.coeffs()), time)
    }

    pub fn inverse_real(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut data = coeffs.to_vec();
        self.transform(&mut data, true);
        data.into_iter().map(|c| c.re).collect()
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.grid.n();
        let d = self.grid.dim();
        let fft = if inverse { &self.backward } else { &self.forward };
        for axis in 0..d {
            let inner = n.pow((d - 1 - axis) as u32);
            if inner == 1 {
                data.par_chunks_mut(n * 64.min(data.len() / n)).for_each(|chunk| fft.process(chunk));
                continue;
            }
            data.par_chunks_mut(n * inner).for_each(|block| {
                let mut lines = vec![Complex64::new(0.0, 0.0); n * inner];
                for j in 0..n {
                    for l in 0..inner {
                        lines[l * n + j] = block[j * inner + l];
                    }
                }
                fft.process(&mut lines);
                for j in 0..n {
                    for l in 0..inner {
                        block[j * inner + l] = lines[l * n + j];
                    }
                }
            });
        }
    }

    /// Applies a real multiplier `m(flat index)` in Fourier space.
    pub fn apply_multiplier(&self, f: &ScalarField, m: impl Fn(usize) -> f64) -> ScalarField {
        let mut c = self.forward(f);
        c.scale_by(m);
        self.inverse(&c, f.time())
    }

    /// Spectral gradient of `f`.
    pub fn gradient(&self, f: &ScalarField) -> VectorField {
        let c = self.forward(f);
        self.gradient_from(&c, f.time())
    }

    pub(crate) fn gradient_from(&self, c: &SpectralField, time: f64) -> VectorField {
        let d = self.grid.dim();
        let components = (0..d)
            .map(|a| {
                let coeffs: Vec<Complex64> =
                    c.coeffs.iter().enumerate().map(|(i, z)| z * Complex64::new(0.0, self.k_odd[i][a])).collect();
                ScalarField::from_parts(self.grid, self.inverse_real(&coeffs), time)
            })
            .collect();
        VectorField::new(components, false).expect("components built from one grid")
    }

    /// Spectral divergence `Σ_a ∂_a b_a`.
    pub fn divergence(&self, b: &VectorField) -> ScalarField {
        let d = self.grid.dim();
        let mut acc = vec![Complex64::new(0.0, 0.0); self.grid.len()];
        for a in 0..d {
            let c = self.forward_real(b.component(a).samples());
            for (i, z) in c.into_iter().enumerate() {
                acc[i] += z * Complex64::new(0.0, self.k_odd[i][a]);
            }
        }
        ScalarField::from_parts(self.grid, self.inverse_real(&acc), b.time())
    }
}

/// Forward then inverse transform; returns the reconstructed field.
pub fn transform_roundtrip(f: &ScalarField) -> Result<ScalarField> {
    f.ensure_finite("transform input")?;
    let sp = Spectral::for_grid(f.grid());
    Ok(sp.inverse(&sp.forward(f), f.time()))
}

/// `(-Δ)^s f` as the multiplier `|k|^{2s}`; the zero mode maps to zero.
pub fn apply_fractional_laplacian(f: &ScalarField, kernel: &KernelSpec) -> Result<ScalarField> {
    if kernel.truncation_radius().is_some() {
        return Err(Error::InvalidParameter("kernel carries a truncation radius; use apply_truncated_operator".into()));
    }
    f.ensure_finite("fractional Laplacian input")?;
    let sp = Spectral::for_grid(f.grid());
    let two_s = 2.0 * kernel.order();
    Ok(sp.apply_multiplier(f, |i| {
        let k = sp.k_abs[i];
        if k == 0.0 {
            0.0
        } else {
            k.powf(two_s)
        }
    }))
}

/// SQG drift `b = ∇^⊥ (-Δ)^{-1/2} u`, i.e. `b̂(k) = i k^⊥/|k| û(k)` with `k^⊥ = (-k₂, k₁)`.
pub fn biot_savart_sqg(u: &ScalarField) -> Result<VectorField> {
    if u.grid().dim() != 2 {
        return Err(Error::InvalidParameter("SQG coupling requires d = 2".into()));
    }
    u.ensure_finite("SQG input")?;
    let sp = Spectral::for_grid(u.grid());
    let c = sp.forward(u);
    Ok(sp.biot_savart_from(&c, u.time()))
}

impl Spectral {
    pub(crate) fn biot_savart_from(&self, c: &SpectralField, time: f64) -> VectorField {
        let perp = |i: usize| -> [f64; 2] {
            let k = self.k_odd[i];
            let mag = self.k_abs[i];
            if mag == 0.0 {
                [0.0, 0.0]
            } else {
                [-k[1] / mag, k[0] / mag]
            }
        };
        let components = (0..2)
            .map(|a| {
                let coeffs: Vec<Complex64> =
                    c.coeffs.iter().enumerate().map(|(i, z)| z * Complex64::new(0.0, perp(i)[a])).collect();
                ScalarField::from_parts(self.grid, self.inverse_real(&coeffs), time)
            })
            .collect();
        VectorField::new(components, true).expect("components built from one grid")
    }
}

/// Projection onto divergence-free fields, `b̂ ↦ b̂ - k (k·b̂)/|k|²`.
pub fn leray_project(b: &VectorField) -> VectorField {
    let grid = *b.grid();
    let sp = Spectral::for_grid(&grid);
    let d = grid.dim();
    let hats: Vec<Vec<Complex64>> = (0..d).map(|a| sp.forward_real(b.component(a).samples())).collect();
    let mut out = hats.clone();
    for i in 0..grid.len() {
        let k = sp.k_odd[i];
        let ksq: f64 = k[..d].iter().map(|x| x * x).sum();
        if ksq == 0.0 {
            continue;
        }
        let dot: Complex64 = (0..d).map(|a| hats[a][i] * k[a]).sum();
        for a in 0..d {
            out[a][i] = hats[a][i] - dot * (k[a] / ksq);
        }
    }
    let components = out.iter().map(|c| ScalarField::from_parts(grid, sp.inverse_real(c), b.time())).collect();
    VectorField::new(components, true).expect("components built from one grid")
}

/// Two-thirds rule: zero every coefficient with some `|m_a| > n/3`.
pub fn dealias(f: &SpectralField) -> SpectralField {
    let mut out = f.clone();
    dealias_in_place(&f.grid, &mut out.coeffs);
    out
}

pub(crate) fn dealias_in_place(grid: &GridSpec, coeffs: &mut [Complex64]) {
    let n = grid.n() as i64;
    let d = grid.dim();
    for (i, c) in coeffs.iter_mut().enumerate() {
        let m = grid.modes(i);
        if m[..d].iter().any(|&v| 3 * v.abs() > n) {
            *c = Complex64::new(0.0, 0.0);
        }
    }
}

/// Max modulus of the spectral divergence of `b`.
pub fn max_divergence(b: &VectorField) -> f64 {
    Spectral::for_grid(b.grid()).divergence(b).max_abs()
}

/// Verifies `max |div b| ≤ 1e-10 · max |b|`; returns the measured divergence.
pub fn check_divergence_free(b: &VectorField) -> Result<f64> {
    let div = max_divergence(b);
    let threshold = DIVERGENCE_TOLERANCE * b.max_norm().max(f64::MIN_POSITIVE);
    if div > threshold {
        return Err(Error::NotDivergenceFree { max_divergence: div, threshold });
    }
    Ok(div)
}
