//! Closed-form checks through the public API. Every expected value is computed here from its
//! formula rather than taken from the library.

use std::f64::consts::PI;

use nldd::evolution::{solve, DriftField, SolverConfig};
use nldd::field::ScalarField;
use nldd::grid::make_grid;
use nldd::heat_kernel::{estimate_kernel, periodized_free_kernel, HeatKernelConfig};
use nldd::kernel::KernelSpec;
use nldd::measure::{Atom, MeasureData};
use nldd::potential::{riesz_potential, tail, PotentialOptions, TailOptions};

fn poisson(t: f64, r: f64) -> f64 {
    t / (2.0 * PI * (t * t + r * r).powf(1.5))
}

/// Sum of free-space Poisson kernels over the images `x + L m`, `|m_i| ≤ n`, with the
/// remaining images replaced by their far-field integral.
fn image_sum(t: f64, x: [f64; 2], l: f64, n: i64) -> f64 {
    let mut sum = 0.0;
    for i in -n..=n {
        for j in -n..=n {
            let (a, b) = (x[0] + l * i as f64, x[1] + l * j as f64);
            sum += poisson(t, (a * a + b * b).sqrt());
        }
    }
    // ∫ t/(2π|z|³) dz / L² outside the square of half-width R = (n + 1/2)L; the integral of
    // |z|^{−3} outside that square is 4√2/R.
    let r = l * (n as f64 + 0.5);
    sum + t / (2.0 * PI) * 4.0 * 2f64.sqrt() / r / (l * l)
}

#[test]
fn heat_flow_of_trigonometric_data() {
    let g = make_grid(2, 64, 2.0 * PI).unwrap();
    for s in [0.5, 0.75] {
        let u0 = ScalarField::from_fn(g, 0.0, |x| x[0].sin() + (3.0 * x[1]).cos());
        let c = SolverConfig::new(KernelSpec::new(2, s).unwrap(), 1e-3, 1.0).with_stride(250);
        let traj = solve(&u0, &DriftField::Zero, &MeasureData::empty(), &c).unwrap();
        assert_eq!(traj.len(), 5);
        for snap in traj.snapshots() {
            let t = snap.time();
            let want = ScalarField::from_fn(g, t, |x| {
                (-t).exp() * x[0].sin() + (-t * 3f64.powf(2.0 * s)).exp() * (3.0 * x[1]).cos()
            });
            assert!(snap.max_diff(&want) <= 1e-6 * want.max_abs(), "s={s} t={t}");
        }
    }
}

#[test]
fn poisson_kernel_point_values() {
    let g = make_grid(2, 256, 16.0).unwrap();
    let k = KernelSpec::new(2, 0.5).unwrap();
    let est =
        estimate_kernel(&DriftField::Zero, &k, &g, 0.0, &[8.0, 8.0], &[1.0], &HeatKernelConfig::new(0.01)).unwrap();
    let p = &est.fields[0];
    for (offset, want) in [(0i64, poisson(1.0, 0.0)), (16, poisson(1.0, 1.0))] {
        let got = p.samples()[g.flat_index_wrapped(&[128 + offset, 128])];
        assert!((got - want).abs() <= 0.02 * want, "offset {offset}: {got} vs {want}");
    }
    assert!((poisson(1.0, 0.0) - 0.159155).abs() < 1e-6);
    assert!((poisson(1.0, 1.0) - 0.056270).abs() < 1e-6);
}

#[test]
fn periodized_kernel_matches_an_image_sum() {
    let g = make_grid(2, 64, 16.0).unwrap();
    let k = KernelSpec::new(2, 0.5).unwrap();
    let y = [8.0, 8.0];
    for t in [0.5, 1.0, 3.0] {
        let per = periodized_free_kernel(&k, &g, t, &y).unwrap();
        for node in [[32i64, 32], [40, 32], [48, 50], [0, 0], [5, 60]] {
            let i = g.flat_index_wrapped(&node);
            let x = g.point(i);
            let disp = [x[0] - y[0], x[1] - y[1]];
            let want = image_sum(t, disp, 16.0, 60);
            let got = per.samples()[i];
            assert!((got - want).abs() <= 1e-5 * want, "t={t} node {node:?}: {got} vs {want}");
        }
    }
}

#[test]
fn estimated_kernel_matches_the_periodized_closed_form() {
    let g = make_grid(2, 128, 16.0).unwrap();
    let k = KernelSpec::new(2, 0.5).unwrap();
    let y = [8.0, 8.0];
    let est = estimate_kernel(&DriftField::Zero, &k, &g, 0.0, &y, &[1.0, 2.0], &HeatKernelConfig::new(0.01)).unwrap();
    for (t, p) in est.times.iter().zip(&est.fields) {
        let floor = 1e-3 * poisson(*t, 0.0);
        for i in (0..g.len()).step_by(7) {
            let x = g.point(i);
            let want = image_sum(*t, [x[0] - y[0], x[1] - y[1]], 16.0, 40);
            if want >= floor {
                let got = p.samples()[i];
                assert!((got - want).abs() <= 0.02 * want, "t={t} x={:?}: {got} vs {want}", &x[..2]);
            }
        }
    }
}

#[test]
fn tail_of_a_constant() {
    let g = make_grid(2, 64, 2.0 * PI).unwrap();
    let one = ScalarField::constant(g, 1.0, 0.0);
    let got = tail(&one, &[1.0, 2.0], 1.0, &TailOptions::for_grid(&g, 0.5)).unwrap();
    // r^{2s} ∫_r^{R} 2πρ ρ^{−3} dρ with r = 1, R = π.
    let want = 2.0 * PI * (1.0 - 1.0 / PI);
    assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
}

#[test]
fn riesz_potential_of_an_atom() {
    let k = KernelSpec::new(2, 0.5).unwrap();
    let mu = MeasureData::from_atoms(vec![Atom::new(0.99, &[0.0, 0.0], 1.0)]).unwrap();
    let p = riesz_potential(&mu, 1.0, &[0.0, 0.0], 1.0, &k, 1.0, &PotentialOptions::default()).unwrap();
    // ∫_ε^1 ρ^{−2} dρ/ρ with ε = 0.01.
    let want = (0.01f64.powi(-2) - 1.0) / 2.0;
    assert_eq!(want, 4999.5);
    assert!((p.value - want).abs() <= 1e-4 * want, "{}", p.value);
}
