//! The strict form of the Poisson-kernel oracle: the estimate on the L = 16 torus against the
//! free-space closed form at every node where the estimate is at least 1e-3. Periodic images
//! contribute a background comparable to that floor, so this is expected to fail; run it with
//! `cargo test -p nldd-core --test poisson_free_space -- --ignored`.

use std::f64::consts::PI;

use nldd::evolution::DriftField;
use nldd::grid::make_grid;
use nldd::heat_kernel::{estimate_kernel, HeatKernelConfig};
use nldd::kernel::KernelSpec;

#[test]
#[ignore = "periodic images exceed the 2% band near the 1e-3 contour"]
fn estimate_matches_free_space_poisson_kernel_wherever_it_exceeds_1e_3() {
    let g = make_grid(2, 256, 16.0).unwrap();
    let k = KernelSpec::new(2, 0.5).unwrap();
    let y = [8.0, 8.0];
    let est = estimate_kernel(&DriftField::Zero, &k, &g, 0.0, &y, &[1.0], &HeatKernelConfig::new(0.01)).unwrap();
    let p = &est.fields[0];
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..g.len() {
        let v = p.samples()[i];
        if v < 1e-3 {
            continue;
        }
        let x = g.point(i);
        let r = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
        let exact = 1.0 / (2.0 * PI * (1.0 + r * r).powf(1.5));
        let e = (v - exact).abs() / exact;
        if e > worst.0 {
            worst = (e, r);
        }
    }
    assert!(worst.0 <= 0.02, "relative error {:.3} at |x - y| = {:.3}", worst.0, worst.1);
}
