//! Structural invariants of the solver, the potentials and the snapshot format.

use std::f64::consts::PI;

use nldd::evolution::{solve, DriftField, DriftMode, SolverConfig};
use nldd::field::{ScalarField, VectorField};
use nldd::grid::{make_grid, sphere_area, GridSpec};
use nldd::kernel::KernelSpec;
use nldd::measure::{Atom, MeasureData};
use nldd::potential::{riesz_potential, tail, PotentialOptions, TailOptions};
use nldd::snapshot::{decode_field, decode_trajectory, encode_field, encode_trajectory};
use proptest::prelude::*;

fn grid() -> GridSpec {
    make_grid(2, 16, 2.0 * PI).unwrap()
}

fn shear(g: GridSpec, a: f64) -> DriftField {
    DriftField::Steady(VectorField::from_fn(g, 0.0, true, move |x| vec![a * x[1].cos(), 0.0]))
}

fn trig(g: GridSpec, c: [f64; 4]) -> ScalarField {
    ScalarField::from_fn(g, 0.0, move |x| {
        c[0] + c[1] * x[0].sin() + c[2] * (2.0 * x[1]).cos() + c[3] * (x[0] + x[1]).sin()
    })
}

fn config(s: f64) -> SolverConfig {
    SolverConfig::new(KernelSpec::new(2, s).unwrap(), 0.02, 0.4).with_drift_mode(DriftMode::Given).with_stride(20)
}

fn coeffs() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-2.0f64..2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn solution_is_linear_in_data_and_measure(
        a in coeffs(),
        b in coeffs(),
        alpha in -2.0f64..2.0,
        mass in 0.0f64..2.0,
        s in prop_oneof![Just(0.5), Just(0.75)],
    ) {
        let g = grid();
        let drift = shear(g, 0.8);
        let c = config(s);
        let mu = MeasureData::from_atoms(vec![Atom::new(0.1, &[1.0, 2.0], mass)]).unwrap();
        let none = MeasureData::empty();
        let u = solve(&trig(g, a), &drift, &mu, &c).unwrap();
        let v = solve(&trig(g, b), &drift, &none, &c).unwrap();
        let data: Vec<f64> = trig(g, a).samples().iter().zip(trig(g, b).samples()).map(|(x, y)| x + alpha * y).collect();
        let w0 = ScalarField::new(g, data, 0.0).unwrap();
        let w = solve(&w0, &drift, &mu, &c).unwrap();
        let (ul, vl, wl) = (u.last(), v.last(), w.last());
        let scale = 1.0 + ul.max_abs() + alpha.abs() * vl.max_abs();
        for i in 0..g.len() {
            let want = ul.samples()[i] + alpha * vl.samples()[i];
            prop_assert!((wl.samples()[i] - want).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn mean_grows_by_the_deposited_mass(a in coeffs(), mass in 0.0f64..3.0, s in 0.3f64..0.9) {
        let g = grid();
        let mu = MeasureData::from_atoms(vec![Atom::new(0.1, &[2.0, 1.0], mass)]).unwrap();
        let u0 = trig(g, a);
        let u = solve(&u0, &shear(g, 1.0), &mu, &config(s)).unwrap();
        let want = u0.mean() + mass / g.volume();
        prop_assert!((u.last().mean() - want).abs() <= 1e-10 * (1.0 + want.abs()));
    }

    #[test]
    fn shear_commutes_with_shifts_along_the_flow(a in coeffs(), cells in 0i64..16) {
        // b depends on x₂ only, so whole-cell shifts in x₁ commute with the evolution.
        let g = grid();
        let drift = shear(g, 1.0);
        let none = MeasureData::empty();
        let u0 = trig(g, a);
        let shift = |f: &ScalarField| {
            let data = (0..g.len())
                .map(|i| {
                    let idx = g.multi_index(i);
                    f.samples()[g.flat_index_wrapped(&[idx[0] as i64 - cells, idx[1] as i64])]
                })
                .collect();
            ScalarField::new(g, data, f.time()).unwrap()
        };
        let u = solve(&u0, &drift, &none, &config(0.5)).unwrap();
        let v = solve(&shift(&u0), &drift, &none, &config(0.5)).unwrap();
        prop_assert!(shift(u.last()).max_diff(v.last()) <= 1e-11 * (1.0 + u.last().max_abs()));
    }

    #[test]
    fn tail_of_a_constant_for_any_order(s in 0.2f64..0.9, r in 0.2f64..2.0, c in -3.0f64..3.0) {
        let g = make_grid(2, 64, 2.0 * PI).unwrap();
        let f = ScalarField::constant(g, c, 0.0);
        let got = tail(&f, &[0.7, 1.9], r, &TailOptions::for_grid(&g, s)).unwrap();
        // r^{2s} |S¹| ∫_r^π ρ^{−1−2s} dρ.
        let want = c.abs() * sphere_area(2) * (1.0 - (r / PI).powf(2.0 * s)) / (2.0 * s);
        prop_assert!((got - want).abs() <= 1e-6 * want.max(1e-12));
    }

    #[test]
    fn riesz_potential_of_an_atom_for_any_order(
        eps in 0.001f64..0.5,
        s in prop_oneof![Just(0.5), Just(0.75)],
        a_frac in 0.1f64..0.9,
        mass in 0.1f64..5.0,
    ) {
        let k = KernelSpec::new(2, s).unwrap();
        let a = a_frac * 2.0 * s;
        let mu = MeasureData::from_atoms(vec![Atom::new(1.0 - eps, &[0.0, 0.0], mass)]).unwrap();
        let p = riesz_potential(&mu, 1.0, &[0.0, 0.0], 1.0, &k, a, &PotentialOptions::default()).unwrap();
        // The atom enters Q_ρ once ρ^{2s} > ε.
        let beta = 2.0 + 2.0 * s - a;
        let rho0 = eps.powf(0.5 / s);
        let want = mass * (rho0.powf(-beta) - 1.0) / beta;
        prop_assert!((p.value - want).abs() <= 1e-4 * want, "{} vs {}", p.value, want);
    }

    #[test]
    fn snapshots_roundtrip_bitwise(values in prop::collection::vec(-1e6f64..1e6, 256), t in -10.0f64..10.0, s in 0.05f64..0.95) {
        let g = grid();
        let f = ScalarField::new(g, values.clone(), t).unwrap();
        let mut bytes = Vec::new();
        encode_field(&f, s, &mut bytes);
        let back = decode_field(&bytes).unwrap();
        prop_assert_eq!(back.s.to_bits(), s.to_bits());
        prop_assert_eq!(back.field.time().to_bits(), t.to_bits());
        prop_assert!(back.field.samples().iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));

        let frames = vec![f.clone(), f.scaled(0.5).with_time(t + 1.0)];
        let mut bytes = Vec::new();
        encode_trajectory(&frames, s, &mut bytes);
        let (traj, s2) = decode_trajectory(&bytes).unwrap();
        prop_assert_eq!(s2.to_bits(), s.to_bits());
        for (a, b) in traj.snapshots().iter().zip(&frames) {
            prop_assert!(a.samples().iter().zip(b.samples()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
