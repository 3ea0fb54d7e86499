//! Campaign configuration files (TOML).
//!
//! A campaign holds a seed and a list of `[[experiment]]` tables. Each experiment fixes a grid,
//! a kernel, a drift, a measure, initial data and a solver, and selects verifications under
//! `[experiment.verify.*]`. See `configs/` for complete examples.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, rename = "experiment")]
    pub experiments: Vec<ExperimentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub grid: GridConfig,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub drift: DriftSpec,
    #[serde(default)]
    pub measure: MeasureSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    pub solver: SolverSpec,
    #[serde(default)]
    pub verify: VerifySelection,
}

fn two_pi() -> f64 {
    2.0 * PI
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    pub n: usize,
    #[serde(default = "two_pi")]
    pub length: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub s: f64,
    /// Ellipticity bound; defaults to the value induced by the kernel normalization.
    pub lambda: Option<f64>,
}

/// Drift families. Wavenumbers are multiples of `2π/L`, so every family is periodic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    #[default]
    None,
    /// `b = (A cos(2π x₂/L), 0, …)`.
    Shear {
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `b ≡ velocity`.
    Constant { velocity: Vec<f64> },
    /// `b = ∇^⊥(−Δ)^{−1/2} u`, recomputed from the solution.
    Sqg,
    /// `b = (Σ_{j=1}^K a_j cos(2^j 2π x₂/L), 0, …)` with `K = coefficients.len()`.
    Lacunary { coefficients: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub t: f64,
    pub x: Vec<f64>,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    #[default]
    None,
    Atoms {
        atoms: Vec<AtomSpec>,
    },
    /// `count` atoms of total mass `mass` along `x(t) = start + velocity (t − t_start)`.
    Track {
        start: Vec<f64>,
        velocity: Vec<f64>,
        t_start: f64,
        t_end: f64,
        count: usize,
        mass: f64,
    },
    /// A density constant in time on `[t_start, t_end]`.
    Density {
        profile: DensityProfile,
        t_start: f64,
        t_end: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityProfile {
    /// `A (|x − c|² + ε²)^{−γ/2}` with `ε` defaulting to two grid spacings.
    Power {
        center: Vec<f64>,
        exponent: f64,
        #[serde(default = "one")]
        amplitude: f64,
        regularization: Option<f64>,
    },
    /// Unnormalized Gaussian `A exp(−|x − c|²/(2w²))`.
    Gaussian {
        center: Vec<f64>,
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    Constant {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeTerm {
    /// Integer wavevector; the physical wavevector is `2π m / L`.
    pub mode: Vec<i64>,
    #[serde(default)]
    pub sin: f64,
    #[serde(default)]
    pub cos: f64,
}

fn default_modes() -> usize {
    4
}

fn default_decay() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    Modes {
        terms: Vec<ModeTerm>,
    },
    /// Random trigonometric polynomial with `|m_a| ≤ modes`, amplitudes `∝ |m|^{−decay}`.
    Random {
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "default_decay")]
        decay: f64,
    },
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Width of the Gaussians representing atoms; defaults to two grid spacings.
    pub mollification: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySelection {
    pub potential: Option<PotentialVerify>,
    pub excess: Option<ExcessVerify>,
    pub holder: Option<HolderVerify>,
    pub lorentz: Option<LorentzVerify>,
    pub comparison: Option<ComparisonVerify>,
    pub bmo_slanted: Option<BmoVerify>,
    pub heat_kernel: Option<HeatKernelVerify>,
}

impl VerifySelection {
    pub fn is_empty(&self) -> bool {
        self == &Self::default()
    }
}

fn default_placements() -> usize {
    10
}

fn default_qs() -> Vec<f64> {
    vec![1.5, 2.0, 4.0]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialVerify {
    #[serde(default = "default_placements")]
    pub placements: usize,
    #[serde(default = "default_qs")]
    pub q: Vec<f64>,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Rerun with `μ` and `u₀` doubled and require identical fitted constants.
    #[serde(default = "default_true")]
    pub homogeneity: bool,
    pub ceiling: Option<f64>,
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcessVerify {
    pub radius: f64,
    pub m_max: usize,
    #[serde(default = "two")]
    pub q: f64,
    /// Defaults to the domain center.
    pub center: Option<Vec<f64>>,
    /// Number of seeded grid-node centers pooled into one fit; replaces `center` when set.
    pub points: Option<usize>,
    /// Defaults to the final time.
    pub t0: Option<f64>,
}

fn default_levels() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderVerify {
    #[serde(default = "default_placements")]
    pub points: usize,
    pub radius: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "two")]
    pub q: f64,
    /// Exponents above this are reported as the cap (smooth fields saturate it).
    #[serde(default = "one")]
    pub alpha_cap: f64,
    pub ceiling: Option<f64>,
}

fn infinity() -> f64 {
    f64::INFINITY
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorentzVerify {
    pub p: f64,
    /// Second Lorentz index; `inf` for the weak space.
    #[serde(default = "infinity")]
    pub sigma: f64,
    /// Radius of the interior window as a fraction of `L/2`.
    #[serde(default = "half")]
    pub window: f64,
    pub ceiling: Option<f64>,
}

fn default_cylinders() -> usize {
    5
}

fn default_masses() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonVerify {
    #[serde(default = "default_cylinders")]
    pub cylinders: usize,
    #[serde(default = "default_masses")]
    pub masses: Vec<f64>,
    pub radius: f64,
    pub ceiling: Option<f64>,
}

fn default_path_radii() -> Vec<f64> {
    vec![0.25, 0.125, 0.0625]
}

fn default_steps() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmoVerify {
    #[serde(default = "default_placements")]
    pub placements: usize,
    #[serde(default = "default_qs")]
    pub q: Vec<f64>,
    pub radius_min: f64,
    pub radius_max: f64,
    #[serde(default = "default_path_radii")]
    pub path_radii: Vec<f64>,
    /// Base point of the path-norm fit; defaults to the origin.
    pub path_center: Option<Vec<f64>>,
    /// `c₀` in the enlargement `θ = 1 + c₀(C₁ + C₂|log r|)`.
    #[serde(default = "one")]
    pub c0: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub ceiling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatKernelVerify {
    #[serde(default)]
    pub eta: f64,
    pub y: Vec<f64>,
    pub times: Vec<f64>,
    /// Horizon `T` of the upper bound; defaults to the last time.
    pub t_max: Option<f64>,
    pub width: Option<f64>,
    #[serde(default = "default_true")]
    pub richardson: bool,
    #[serde(default)]
    pub gluing_radii: Vec<f64>,
    /// Time of the gluing comparison; defaults to the first time.
    pub gluing_time: Option<f64>,
    pub ceiling: Option<f64>,
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
