//! Uniform grids on the d-torus `[0, L)^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// A uniform periodic grid with `n` points per axis on `[0, L)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    d: usize,
    n: usize,
    length: f64,
}

/// Builds a grid after validating the dimension, resolution and domain length.
pub fn make_grid(d: usize, n: usize, length: f64) -> Result<GridSpec> {
    GridSpec::new(d, n, length)
}

impl GridSpec {
    pub fn new(d: usize, n: usize, length: f64) -> Result<Self> {
        if d != 2 && d != 3 {
            return Err(Error::InvalidGrid(format!("dimension {d} not in {{2, 3}}")));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!("points per axis {n} must be a power of two >= 8")));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!("domain length {length} must be positive")));
        }
        Ok(Self { d, n, length })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Total number of grid points, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume of one grid cell, `spacing^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.d as i32)
    }

    /// Volume of the torus, `L^d`.
    pub fn volume(&self) -> f64 {
        self.length.powi(self.d as i32)
    }

    /// Row-major multi-index of a flat index (last axis fastest).
    pub fn multi_index(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for a in (0..self.d).rev() {
            idx[a] = flat % self.n;
            flat /= self.n;
        }
        idx
    }

    /// Flat index of a multi-index whose entries may be any integers (wrapped periodically).
    pub fn flat_index_wrapped(&self, idx: &[i64]) -> usize {
        let n = self.n as i64;
        idx[..self.d].iter().fold(0usize, |acc, &i| acc * self.n + i.rem_euclid(n) as usize)
    }

    /// Physical coordinates of the grid node with the given flat index.
    pub fn point(&self, flat: usize) -> [f64; MAX_DIM] {
        let idx = self.multi_index(flat);
        let h = self.spacing();
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.d {
            x[a] = idx[a] as f64 * h;
        }
        x
    }

    /// Signed integer wavevector component for an FFT index: `m ∈ [-n/2, n/2)`.
    pub fn mode(&self, i: usize) -> i64 {
        let n = self.n as i64;
        let i = i as i64;
        if i < n / 2 {
            i
        } else {
            i - n
        }
    }

    /// Integer wavevector `m` of a flat spectral index.
    pub fn modes(&self, flat: usize) -> [i64; MAX_DIM] {
        let idx = self.multi_index(flat);
        let mut m = [0; MAX_DIM];
        for a in 0..self.d {
            m[a] = self.mode(idx[a]);
        }
        m
    }

    /// Physical wavevector `k = (2π/L) m` of a flat spectral index.
    pub fn wavevector(&self, flat: usize) -> [f64; MAX_DIM] {
        let m = self.modes(flat);
        let scale = 2.0 * std::f64::consts::PI / self.length;
        let mut k = [0.0; MAX_DIM];
        for a in 0..self.d {
            k[a] = scale * m[a] as f64;
        }
        k
    }

    /// Minimum-image displacement `x - y` on the torus.
    pub fn displacement(&self, x: &[f64], y: &[f64]) -> [f64; MAX_DIM] {
        let l = self.length;
        let mut dx = [0.0; MAX_DIM];
        for a in 0..self.d {
            let mut v = (x[a] - y[a]).rem_euclid(l);
            if v >= 0.5 * l {
                v -= l;
            }
            dx[a] = v;
        }
        dx
    }

    /// Torus distance between two points.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        norm(&self.displacement(x, y)[..self.d])
    }

    /// Wraps a point into the fundamental domain.
    pub fn wrap(&self, x: &[f64]) -> Vec<f64> {
        x[..self.d].iter().map(|v| v.rem_euclid(self.length)).collect()
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("point {x:?} is not a finite {}-vector", self.d)));
        }
        Ok(())
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    use std::f64::consts::PI;
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!("dimension checked by GridSpec"),
    }
}

/// Volume of the ball of radius `r` in `R^d`.
pub fn ball_volume(d: usize, r: f64) -> f64 {
    sphere_area(d) * r.powi(d as i32) / d as f64
}
