//! Balls on the torus: cell-coverage stencils for ball integrals and periodic interpolation.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::{GridSpec, MAX_DIM};

/// Sub-samples per axis used to estimate the covered fraction of a boundary cell.
fn subsamples(d: usize) -> usize {
    if d == 2 {
        16
    } else {
        8
    }
}

/// Open ball `B_r(center)` on the torus.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: &[f64], radius: f64) -> Self {
        Self { center: center.to_vec(), radius }
    }
}

/// Quadrature weights for `∫_{B} g dx` on a grid: each node carries the covered volume of the
/// cell centered at it.
#[derive(Debug, Clone)]
pub struct BallStencil {
    indices: Vec<usize>,
    weights: Vec<f64>,
    volume: f64,
    /// Unwrapped integer offsets of the nodes from the node nearest the center.
    pub(crate) offsets: Vec<[i64; MAX_DIM]>,
}

impl BallStencil {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Discrete volume `Σ w_i`; exact up to the boundary sub-sampling.
    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn integrate(&self, samples: &[f64]) -> f64 {
        self.indices.iter().zip(&self.weights).map(|(&i, w)| w * samples[i]).sum()
    }

    pub fn integrate_with(&self, samples: &[f64], f: impl Fn(f64) -> f64) -> f64 {
        self.indices.iter().zip(&self.weights).map(|(&i, w)| w * f(samples[i])).sum()
    }

    pub fn mean(&self, samples: &[f64]) -> f64 {
        self.integrate(samples) / self.volume
    }

    pub fn mean_with(&self, samples: &[f64], f: impl Fn(f64) -> f64) -> f64 {
        self.integrate_with(samples, f) / self.volume
    }
}

/// Stencil relative to a reference node: integer offsets and covered volumes.
#[derive(Debug, Clone)]
pub(crate) struct OffsetStencil {
    pub offsets: Vec<[i64; MAX_DIM]>,
    pub weights: Vec<f64>,
}

type StencilKey = (usize, usize, u64, u64);
static ALIGNED: Lazy<Mutex<HashMap<StencilKey, Arc<OffsetStencil>>>> = Lazy::new(|| Mutex::new(HashMap::new()));

fn check_radius(grid: &GridSpec, radius: f64) -> Result<()> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::Geometry(format!("ball radius {radius} must be positive")));
    }
    let limit = 0.5 * grid.length() - grid.spacing();
    if radius > limit {
        return Err(Error::Geometry(format!("ball radius {radius} exceeds {limit} (half the torus minus one cell)")));
    }
    Ok(())
}

/// Offsets and covered volumes for a ball whose center sits at `delta` (in cell units) from a node.
fn offset_stencil(grid: &GridSpec, delta: &[f64], radius: f64) -> OffsetStencil {
    let d = grid.dim();
    let h = grid.spacing();
    let rc = radius / h;
    let reach = rc.ceil() as i64 + 1;
    let sub = subsamples(d);
    let half_diag = 0.5 * (d as f64).sqrt();
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    let side = (2 * reach + 1) as usize;
    let count = side.pow(d as u32);
    for flat in 0..count {
        let mut o = [0i64; MAX_DIM];
        let mut rem = flat;
        for a in (0..d).rev() {
            o[a] = (rem % side) as i64 - reach;
            rem /= side;
        }
        let rel: Vec<f64> = (0..d).map(|a| o[a] as f64 - delta[a]).collect();
        let dist = rel.iter().map(|v| v * v).sum::<f64>().sqrt();
        let fraction = if dist + half_diag <= rc {
            1.0
        } else if dist - half_diag >= rc {
            0.0
        } else {
            // Nearest point of the cell to the center decides emptiness exactly.
            let near: f64 = rel.iter().map(|v| (v.abs() - 0.5).max(0.0).powi(2)).sum::<f64>().sqrt();
            if near >= rc {
                0.0
            } else {
                let mut inside = 0usize;
                let total = sub.pow(d as u32);
                for k in 0..total {
                    let mut r2 = 0.0;
                    let mut rem = k;
                    for v in rel.iter().take(d) {
                        let j = rem % sub;
                        rem /= sub;
                        let p = v - 0.5 + (j as f64 + 0.5) / sub as f64;
                        r2 += p * p;
                    }
                    if r2 < rc * rc {
                        inside += 1;
                    }
                }
                inside as f64 / total as f64
            }
        };
        if fraction > 0.0 {
            offsets.push(o);
            weights.push(fraction * grid.cell_volume());
        }
    }
    OffsetStencil { offsets, weights }
}

/// Stencil for a ball centered exactly at a grid node, shared through a cache.
pub(crate) fn aligned_offsets(grid: &GridSpec, radius: f64) -> Result<Arc<OffsetStencil>> {
    check_radius(grid, radius)?;
    let key = (grid.dim(), grid.n(), grid.length().to_bits(), radius.to_bits());
    if let Some(s) = ALIGNED.lock().expect("poisoned").get(&key) {
        return Ok(s.clone());
    }
    let st = Arc::new(offset_stencil(grid, &[0.0; MAX_DIM], radius));
    ALIGNED.lock().expect("poisoned").insert(key, st.clone());
    Ok(st)
}

fn nearest_node(grid: &GridSpec, center: &[f64]) -> ([i64; MAX_DIM], [f64; MAX_DIM]) {
    let h = grid.spacing();
    let mut node = [0i64; MAX_DIM];
    let mut delta = [0.0; MAX_DIM];
    for a in 0..grid.dim() {
        let u = center[a] / h;
        let k = u.round();
        node[a] = k as i64;
        delta[a] = u - k;
    }
    (node, delta)
}

fn translate(grid: &GridSpec, st: &OffsetStencil, node: &[i64; MAX_DIM]) -> BallStencil {
    let d = grid.dim();
    let mut idx = [0i64; MAX_DIM];
    let indices = st
        .offsets
        .iter()
        .map(|o| {
            for a in 0..d {
                idx[a] = node[a] + o[a];
            }
            grid.flat_index_wrapped(&idx[..d])
        })
        .collect();
    let volume = st.weights.iter().sum();
    BallStencil { indices, weights: st.weights.clone(), volume, offsets: st.offsets.clone() }
}

/// Coverage stencil of `B_r(center)`; `center` may be any point of the torus.
pub fn ball_stencil(grid: &GridSpec, center: &[f64], radius: f64) -> Result<BallStencil> {
    check_radius(grid, radius)?;
    if center.len() != grid.dim() || center.iter().any(|v| !v.is_finite()) {
        return Err(Error::Geometry("ball center has wrong dimension or is not finite".into()));
    }
    let (node, delta) = nearest_node(grid, center);
    if delta.iter().all(|&v| v.abs() < 1e-12) {
        let st = aligned_offsets(grid, radius)?;
        return Ok(translate(grid, &st, &node));
    }
    let st = offset_stencil(grid, &delta, radius);
    Ok(translate(grid, &st, &node))
}

/// Periodic cubic Lagrange interpolation (4 nodes per axis).
pub fn interpolate_cubic(f: &ScalarField, x: &[f64]) -> f64 {
    interpolate(f.grid(), f.samples(), x, 4)
}

/// Periodic multilinear interpolation.
pub fn interpolate_linear(f: &ScalarField, x: &[f64]) -> f64 {
    interpolate(f.grid(), f.samples(), x, 2)
}

pub(crate) fn interpolate(grid: &GridSpec, samples: &[f64], x: &[f64], points: usize) -> f64 {
    let d = grid.dim();
    let h = grid.spacing();
    let mut base = [0i64; MAX_DIM];
    let mut w = [[0.0; 4]; MAX_DIM];
    for a in 0..d {
        let u = x[a] / h;
        let fl = u.floor();
        let t = u - fl;
        if points == 2 {
            base[a] = fl as i64;
            w[a][0] = 1.0 - t;
            w[a][1] = t;
        } else {
            base[a] = fl as i64 - 1;
            // Nodes at -1, 0, 1, 2 relative to floor.
            w[a][0] = -t * (t - 1.0) * (t - 2.0) / 6.0;
            w[a][1] = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
            w[a][2] = -(t + 1.0) * t * (t - 2.0) / 2.0;
            w[a][3] = (t + 1.0) * t * (t - 1.0) / 6.0;
        }
    }
    let total = points.pow(d as u32);
    let mut acc = 0.0;
    let mut idx = [0i64; MAX_DIM];
    for k in 0..total {
        let mut rem = k;
        let mut weight = 1.0;
        for a in 0..d {
            let j = rem % points;
            rem /= points;
            idx[a] = base[a] + j as i64;
            weight *= w[a][j];
        }
        acc += weight * samples[grid.flat_index_wrapped(&idx[..d])];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ball_volume, make_grid};
    use std::f64::consts::PI;

    #[test]
    fn stencil_volume_matches_ball_volume() {
        let g = make_grid(2, 64, 2.0 * PI).unwrap();
        for (c, r) in [([PI, PI], 0.5), ([0.01, 6.2], 1.3), ([1.234, 2.345], 0.25)] {
            let st = ball_stencil(&g, &c, r).unwrap();
            let v = ball_volume(2, r);
            assert!((st.volume() - v).abs() < 2e-3 * v, "r={r}: {} vs {v}", st.volume());
        }
        let g3 = make_grid(3, 32, 2.0 * PI).unwrap();
        let st = ball_stencil(&g3, &[1.0, 2.0, 3.0], 1.0).unwrap();
        assert!((st.volume() - ball_volume(3, 1.0)).abs() < 5e-3 * ball_volume(3, 1.0));
    }

    #[test]
    fn stencil_rejects_oversized_balls() {
        let g = make_grid(2, 16, 1.0).unwrap();
        assert!(ball_stencil(&g, &[0.5, 0.5], 0.49).is_err());
        assert!(ball_stencil(&g, &[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn ball_mean_of_smooth_function() {
        // Mean of cos(x₁) over B_r(0) is 2 J₁(r)/r.
        let g = make_grid(2, 128, 2.0 * PI).unwrap();
        let f = ScalarField::from_fn(g, 0.0, |x| x[0].cos());
        let st = ball_stencil(&g, &[0.0, 0.0], 1.0).unwrap();
        let want = crate::quadrature::ball_average_symbol(2, 1.0);
        assert!((st.mean(f.samples()) - want).abs() < 2e-3);
    }

    #[test]
    fn interpolation_reproduces_nodes_and_smooth_fields() {
        let g = make_grid(2, 64, 2.0 * PI).unwrap();
        let f = ScalarField::from_fn(g, 0.0, |x| x[0].sin() * x[1].cos());
        let p = g.point(100);
        assert!((interpolate_cubic(&f, &p[..2]) - f.samples()[100]).abs() < 1e-14);
        assert!((interpolate_linear(&f, &p[..2]) - f.samples()[100]).abs() < 1e-14);
        let x = [6.25f64, 0.031];
        let want = x[0].sin() * x[1].cos();
        assert!((interpolate_cubic(&f, &x) - want).abs() < 1e-5);
        assert!((interpolate_linear(&f, &x) - want).abs() < 2e-3);
    }
}
