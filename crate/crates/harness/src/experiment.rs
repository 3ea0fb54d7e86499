//! Turning an [`ExperimentConfig`] into solver inputs.

use std::f64::consts::PI;

use nldd::evolution::{solve, solve_sqg, DriftField, DriftMode, SolverConfig, TrajectoryStore};
use nldd::field::{ScalarField, VectorField};
use nldd::grid::GridSpec;
use nldd::kernel::KernelSpec;
use nldd::measure::{Atom, DensitySeries, MeasureData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DensityProfile, DriftSpec, ExperimentConfig, InitialSpec, MeasureSpec};
use crate::HarnessError;

/// Seed for one named consumer of randomness inside an experiment.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Everything a verification needs: grid, kernel, drift, measure, data and solver settings.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: String,
    pub seed: u64,
    pub grid: GridSpec,
    pub kernel: KernelSpec,
    pub drift_spec: DriftSpec,
    pub drift: DriftField,
    pub measure: MeasureData,
    pub u0: ScalarField,
    pub solver: SolverConfig,
}

fn fundamental(grid: &GridSpec) -> f64 {
    2.0 * PI / grid.length()
}

/// Drift field of a family (`Zero` for SQG, whose drift comes from the solution).
pub fn build_drift(spec: &DriftSpec, grid: &GridSpec) -> Result<DriftField, HarnessError> {
    let d = grid.dim();
    let k0 = fundamental(grid);
    let field = match spec {
        DriftSpec::None | DriftSpec::Sqg => return Ok(DriftField::Zero),
        DriftSpec::Shear { amplitude } => {
            let a = *amplitude;
            VectorField::from_fn(*grid, 0.0, true, move |x| {
                let mut v = vec![0.0; d];
                v[0] = a * (k0 * x[1]).cos();
                v
            })
        }
        DriftSpec::Constant { velocity } => {
            if velocity.len() != d {
                return Err(HarnessError::Config(format!("constant drift needs {d} components")));
            }
            VectorField::constant(*grid, velocity, 0.0)
        }
        DriftSpec::Lacunary { coefficients } => {
            if coefficients.is_empty() {
                return Err(HarnessError::Config("lacunary drift needs at least one coefficient".into()));
            }
            let top = (1u64 << coefficients.len()) as f64;
            if top >= grid.n() as f64 / 3.0 {
                return Err(HarnessError::Config(format!(
                    "lacunary mode 2^{} is not resolved by n = {}",
                    coefficients.len(),
                    grid.n()
                )));
            }
            let a = coefficients.clone();
            VectorField::from_fn(*grid, 0.0, true, move |x| {
                let mut v = vec![0.0; d];
                v[0] = a.iter().enumerate().map(|(j, aj)| aj * ((1u64 << (j + 1)) as f64 * k0 * x[1]).cos()).sum();
                v
            })
        }
    };
    Ok(DriftField::Steady(field))
}

pub fn drift_mode(spec: &DriftSpec) -> DriftMode {
    match spec {
        DriftSpec::None => DriftMode::None,
        DriftSpec::Sqg => DriftMode::Sqg,
        _ => DriftMode::Given,
    }
}

fn density_field(profile: &DensityProfile, grid: &GridSpec) -> Result<ScalarField, HarnessError> {
    let d = grid.dim();
    let check = |c: &[f64]| -> Result<(), HarnessError> {
        if c.len() != d {
            return Err(HarnessError::Config(format!("density center needs {d} coordinates")));
        }
        Ok(())
    };
    let dist2 = |x: &[f64], c: &[f64]| {
        let disp = grid.displacement(x, c);
        disp[..d].iter().map(|v| v * v).sum::<f64>()
    };
    Ok(match profile {
        DensityProfile::Power { center, exponent, amplitude, regularization } => {
            check(center)?;
            let eps = regularization.unwrap_or(2.0 * grid.spacing());
            ScalarField::from_fn(*grid, 0.0, |x| amplitude * (dist2(x, center) + eps * eps).powf(-0.5 * exponent))
        }
        DensityProfile::Gaussian { center, width, amplitude } => {
            check(center)?;
            ScalarField::from_fn(*grid, 0.0, |x| amplitude * (-dist2(x, center) / (2.0 * width * width)).exp())
        }
        DensityProfile::Constant { value } => ScalarField::constant(*grid, *value, 0.0),
    })
}

pub fn build_measure(spec: &MeasureSpec, grid: &GridSpec) -> Result<MeasureData, HarnessError> {
    let d = grid.dim();
    let mu = match spec {
        MeasureSpec::None => MeasureData::empty(),
        MeasureSpec::Atoms { atoms } => {
            let atoms = atoms
                .iter()
                .map(|a| {
                    if a.x.len() != d {
                        return Err(HarnessError::Config(format!("atom position needs {d} coordinates")));
                    }
                    Ok(Atom::new(a.t, &grid.wrap(&a.x), a.mass))
                })
                .collect::<Result<Vec<_>, _>>()?;
            MeasureData::from_atoms(atoms)?
        }
        MeasureSpec::Track { start, velocity, t_start, t_end, count, mass } => {
            if start.len() != d || velocity.len() != d || *count == 0 || !(t_end > t_start) {
                return Err(HarnessError::Config("atom track needs d-vectors, count > 0 and t_end > t_start".into()));
            }
            let dt = (t_end - t_start) / *count as f64;
            let atoms = (0..*count)
                .map(|k| {
                    let t = t_start + (k as f64 + 0.5) * dt;
                    let x: Vec<f64> = start.iter().zip(velocity).map(|(s, v)| s + v * (t - t_start)).collect();
                    Atom::new(t, &grid.wrap(&x), mass / *count as f64)
                })
                .collect();
            MeasureData::from_atoms(atoms)?
        }
        MeasureSpec::Density { profile, t_start, t_end } => {
            let field = density_field(profile, grid)?;
            MeasureData::new(Vec::new(), Some(DensitySeries::steady(&field, *t_start, *t_end)?))?
        }
    };
    Ok(mu)
}

pub fn build_initial(spec: &InitialSpec, grid: &GridSpec, seed: u64) -> Result<ScalarField, HarnessError> {
    let d = grid.dim();
    let k0 = fundamental(grid);
    Ok(match spec {
        InitialSpec::Zero => ScalarField::zeros(*grid, 0.0),
        InitialSpec::Constant { value } => ScalarField::constant(*grid, *value, 0.0),
        InitialSpec::Modes { terms } => {
            if terms.iter().any(|t| t.mode.len() != d) {
                return Err(HarnessError::Config(format!("modes need {d} integer components")));
            }
            ScalarField::from_fn(*grid, 0.0, |x| {
                terms
                    .iter()
                    .map(|t| {
                        let phase: f64 = t.mode.iter().zip(x).map(|(m, xi)| *m as f64 * k0 * xi).sum();
                        t.sin * phase.sin() + t.cos * phase.cos()
                    })
                    .sum()
            })
        }
        InitialSpec::Random { modes, amplitude, decay } => {
            let mut rng = rng_for(seed, "initial");
            let m = *modes as i64;
            let side = (2 * m + 1) as usize;
            let mut terms = Vec::new();
            for flat in 0..side.pow(d as u32) {
                let mut rem = flat;
                let mut k = vec![0i64; d];
                for v in k.iter_mut() {
                    *v = (rem % side) as i64 - m;
                    rem /= side;
                }
                // One representative per ±k pair; the mean is left at zero.
                let first = k.iter().find(|v| **v != 0);
                if first.is_none_or(|v| *v < 0) {
                    continue;
                }
                let size = k.iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
                let a = amplitude * size.powf(-decay);
                terms.push((k, a * rng.gen_range(-1.0..1.0), a * rng.gen_range(-1.0..1.0)));
            }
            ScalarField::from_fn(*grid, 0.0, |x| {
                terms
                    .iter()
                    .map(|(k, s, c)| {
                        let phase: f64 = k.iter().zip(x).map(|(m, xi)| *m as f64 * k0 * xi).sum();
                        s * phase.sin() + c * phase.cos()
                    })
                    .sum()
            })
        }
    })
}

impl Experiment {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self, HarnessError> {
        let grid = GridSpec::new(cfg.grid.d, cfg.grid.n, cfg.grid.length)?;
        let mut kernel = KernelSpec::new(cfg.grid.d, cfg.kernel.s)?;
        if let Some(l) = cfg.kernel.lambda {
            kernel = kernel.with_lambda(l)?;
        }
        if matches!(cfg.drift, DriftSpec::Sqg) && (cfg.grid.d != 2 || (cfg.kernel.s - 0.5).abs() > 1e-15) {
            return Err(HarnessError::Config("the SQG drift needs d = 2 and s = 1/2".into()));
        }
        let seed = derive_seed(seed, &cfg.name);
        let drift = build_drift(&cfg.drift, &grid)?;
        let mut solver = SolverConfig::new(kernel, cfg.solver.dt, cfg.solver.t_end)
            .with_drift_mode(drift_mode(&cfg.drift))
            .with_stride(cfg.solver.stride.max(1));
        if let Some(h) = cfg.solver.mollification {
            solver = solver.with_mollification(h);
        }
        let measure = build_measure(&cfg.measure, &grid)?.with_resolution(solver.mollification(&grid));
        let u0 = build_initial(&cfg.initial, &grid, seed)?;
        Ok(Self {
            name: cfg.name.clone(),
            seed,
            grid,
            kernel,
            drift_spec: cfg.drift.clone(),
            drift,
            measure,
            u0,
            solver,
        })
    }

    pub fn is_sqg(&self) -> bool {
        matches!(self.drift_spec, DriftSpec::Sqg)
    }

    pub fn s(&self) -> f64 {
        self.kernel.order()
    }

    pub fn t_end(&self) -> f64 {
        self.solver.t_end
    }

    pub fn solve(&self) -> Result<TrajectoryStore, HarnessError> {
        Ok(if self.is_sqg() {
            solve_sqg(&self.u0, &self.measure, &self.solver)?
        } else {
            solve(&self.u0, &self.drift, &self.measure, &self.solver)?
        })
    }

    /// The same experiment with `μ` and `u₀` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { u0: self.u0.scaled(c), measure: self.measure.scaled(c), ..self.clone() }
    }

    pub fn with_measure(&self, measure: MeasureData) -> Self {
        let h = self.solver.mollification(&self.grid);
        Self { measure: measure.with_resolution(h), ..self.clone() }
    }

    /// Drift bounds at the stored times (for SQG: of the generated drift).
    pub fn drift_sup(&self, traj: &TrajectoryStore) -> f64 {
        match traj.drift_sup() {
            Some(v) => v.into_iter().fold(0.0, f64::max),
            None => match &self.drift {
                DriftField::Steady(b) => b.max_norm(),
                _ => 0.0,
            },
        }
    }

    /// A uniformly drawn grid node.
    pub fn random_node(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let i = rng.gen_range(0..self.grid.len());
        self.grid.point(i)[..self.grid.dim()].to_vec()
    }
}
