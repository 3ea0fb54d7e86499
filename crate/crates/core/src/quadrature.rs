//! One-dimensional quadrature rules and the Bessel functions needed by the radial integrals.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrates `f` over `[a, b]` with an `n`-point Gauss–Legendre rule.
pub fn gauss_legendre_integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    x.iter().zip(&w).map(|(&xi, &wi)| wi * f(mid + half * xi)).sum::<f64>() * half
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const K15_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const G7_WEIGHTS: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// One Gauss–Kronrod (7, 15) panel: returns the Kronrod value and `|K15 - G7|`.
pub fn gauss_kronrod_panel(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    let mut kronrod = K15_WEIGHTS[7] * fc;
    let mut gauss = G7_WEIGHTS[3] * fc;
    for j in 0..7 {
        let dx = half * GK_NODES[j];
        let s = f(mid - dx) + f(mid + dx);
        kronrod += K15_WEIGHTS[j] * s;
        if j % 2 == 1 {
            gauss += G7_WEIGHTS[j / 2] * s;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Adaptive Gauss–Kronrod integration with bisection of the worst panel.
///
/// Fails with [`Error::Quadrature`] when the estimated error stays above
/// `max(abs_tol, rel_tol·|value|)` after `max_panels` panels.
pub fn adaptive(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_panels: usize,
) -> Result<(f64, f64)> {
    if a == b {
        return Ok((0.0, 0.0));
    }
    let (v, e) = gauss_kronrod_panel(&f, a, b);
    let mut panels = vec![(a, b, v, e)];
    loop {
        let value: f64 = panels.iter().map(|p| p.2).sum();
        let error: f64 = panels.iter().map(|p| p.3).sum();
        if error <= abs_tol.max(rel_tol * value.abs()) {
            return Ok((value, error));
        }
        if panels.len() >= max_panels {
            return Err(Error::Quadrature { value, error });
        }
        let (worst, _) = panels.iter().enumerate().max_by(|x, y| x.1 .3.total_cmp(&y.1 .3)).expect("non-empty");
        let (pa, pb, _, _) = panels.swap_remove(worst);
        let pm = 0.5 * (pa + pb);
        let (v1, e1) = gauss_kronrod_panel(&f, pa, pm);
        let (v2, e2) = gauss_kronrod_panel(&f, pm, pb);
        panels.push((pa, pm, v1, e1));
        panels.push((pm, pb, v2, e2));
    }
}

/// Bessel function of the first kind `J_n(x)` for `n ∈ {0, 1}`.
///
/// Small arguments use the trapezoid rule on Bessel's integral, which converges
/// geometrically; large arguments use the Hankel asymptotic expansion.
pub fn bessel_j(order: u32, x: f64) -> f64 {
    debug_assert!(order <= 1);
    let sign = if order == 1 && x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let value = if x < 30.0 {
        let m = 2 * ((x.ceil() as usize + 40) / 2);
        let n = order as f64;
        let mut acc = 0.0;
        for j in 0..m {
            let tau = 2.0 * PI * j as f64 / m as f64;
            acc += (n * tau - x * tau.sin()).cos();
        }
        acc / m as f64
    } else {
        hankel_asymptotic(order, x)
    };
    sign * value
}

fn hankel_asymptotic(order: u32, x: f64) -> f64 {
    let mu = 4.0 * (order * order) as f64;
    let z = 8.0 * x;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut term = 1.0;
    let mut last = f64::INFINITY;
    for k in 1..40 {
        let odd = (2 * k - 1) as f64;
        term *= (mu - odd * odd) / (k as f64 * z);
        if term.abs() > last {
            break;
        }
        last = term.abs();
        if k % 2 == 1 {
            let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
            q += sign * term;
        } else {
            let sign = if (k / 2) % 2 == 1 { -1.0 } else { 1.0 };
            p += sign * term;
        }
        if term.abs() < 1e-17 {
            break;
        }
    }
    let chi = x - (0.5 * order as f64 + 0.25) * PI;
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Ball average of a unit plane wave, `⨍_{B_1} e^{i ξ·x} dx` as a function of `|ξ|`.
pub fn ball_average_symbol(d: usize, x: f64) -> f64 {
    let x = x.abs();
    if x < 0.5 {
        let x2 = x * x;
        let mut sum = 0.0;
        let mut power = 1.0;
        for j in 0..12 {
            let jf = j as f64;
            let coeff = match d {
                // 2 J₁(x)/x = Σ (-1)^j (x/2)^{2j} / (j! (j+1)!)
                2 => 1.0 / (4f64.powi(j) * factorial(j) * factorial(j + 1)),
                // 3 (sin x - x cos x)/x³ = Σ (-1)^j 6(j+1) x^{2j} / (2j+3)!
                _ => 6.0 * (jf + 1.0) / factorial(2 * j + 3),
            };
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * coeff * power;
            power *= x2;
        }
        return sum;
    }
    match d {
        2 => 2.0 * bessel_j(1, x) / x,
        _ => 3.0 * (x.sin() - x * x.cos()) / (x * x * x),
    }
}

fn factorial(n: i32) -> f64 {
    (1..=n).map(f64::from).product()
}
