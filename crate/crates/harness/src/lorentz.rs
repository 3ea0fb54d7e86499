//! Empirical Lorentz quasi-norms from weighted samples, and the exponent arithmetic of the
//! Lorentz regularity implication.

use num_rational::Ratio;

use crate::HarnessError;

fn exact(v: f64, what: &str) -> Result<Ratio<i64>, HarnessError> {
    Ratio::<i64>::approximate_float(v)
        .filter(|r| (*r.numer() as f64 / *r.denom() as f64 - v).abs() <= 1e-12 * v.abs().max(1.0))
        .ok_or_else(|| HarnessError::Config(format!("{what} = {v} has no small rational form")))
}

fn to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Admissible data exponents `p ∈ (1, (d+2s)/(2s))`, as the open interval's right end.
pub fn critical_exponent(d: usize, s: f64) -> Result<f64, HarnessError> {
    let s = exact(s, "s")?;
    let d = Ratio::from_integer(d as i64);
    let two_s = s * 2;
    Ok(to_f64((d + two_s) / two_s))
}

/// Target exponent `p(d+2s)/(d+2s−2sp)`, evaluated in exact rational arithmetic so that
/// rational inputs give correctly rounded results.
pub fn target_exponent(d: usize, s: f64, p: f64) -> Result<f64, HarnessError> {
    let (sr, pr) = (exact(s, "s")?, exact(p, "p")?);
    let one = Ratio::from_integer(1);
    let dr = Ratio::from_integer(d as i64);
    let top = dr + sr * 2;
    if !(sr > Ratio::from_integer(0) && sr < one) {
        return Err(HarnessError::Config(format!("order s = {s} not in (0, 1)")));
    }
    if !(pr > one && pr < top / (sr * 2)) {
        return Err(HarnessError::Config(format!(
            "p = {p} outside the admissible range (1, {})",
            to_f64(top / (sr * 2))
        )));
    }
    Ok(to_f64(pr * top / (top - sr * 2 * pr)))
}

/// `‖f‖_{p,σ} = (∫_0^∞ (t^{1/p} f*(t))^σ dt/t)^{1/σ}` (for `σ = ∞`, `sup_t t^{1/p} f*(t)`),
/// where `f*` is the decreasing rearrangement of `|f|` with respect to the sample weights.
/// `f*` is a step function, so every piece is integrated exactly.
pub fn lorentz_norm(values: &[f64], weights: &[f64], p: f64, sigma: f64) -> Result<f64, HarnessError> {
    if values.len() != weights.len() {
        return Err(HarnessError::Config("values and weights differ in length".into()));
    }
    if !(p > 0.0 && p.is_finite()) || !(sigma > 0.0) {
        return Err(HarnessError::Config(format!("Lorentz indices ({p}, {sigma}) must be positive")));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || values.iter().any(|v| !v.is_finite()) {
        return Err(HarnessError::Config("Lorentz samples must be finite with nonnegative weights".into()));
    }
    let mut pairs: Vec<(f64, f64)> =
        values.iter().zip(weights).filter(|(_, w)| **w > 0.0).map(|(v, w)| (v.abs(), *w)).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut level = 0.0f64;
    if sigma.is_infinite() {
        let mut best = 0.0f64;
        for (a, w) in pairs {
            level += w;
            best = best.max(a * level.powf(1.0 / p));
        }
        return Ok(best);
    }
    let e = sigma / p;
    let mut sum = 0.0;
    for (a, w) in pairs {
        let next = level + w;
        sum += a.powf(sigma) * (next.powf(e) - level.powf(e)) / e;
        level = next;
    }
    Ok(sum.powf(1.0 / sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn critical_example_is_exactly_two() {
        assert_eq!(target_exponent(2, 0.5, 1.2).unwrap(), 2.0);
        assert_eq!(critical_exponent(2, 0.5).unwrap(), 3.0);
        assert_eq!(target_exponent(3, 0.75, 1.5).unwrap(), 1.5 * 4.5 / 2.25);
        assert!(target_exponent(2, 0.5, 3.0).is_err());
        assert!(target_exponent(2, 0.5, 1.0).is_err());
    }

    #[test]
    fn diagonal_index_is_the_lebesgue_norm() {
        let v = [3.0, -1.0, 0.5, 2.0];
        let w = [0.1, 0.4, 0.2, 0.3];
        let lp: f64 = v.iter().zip(&w).map(|(a, b): (&f64, &f64)| b * a.abs().powf(1.5)).sum::<f64>().powf(1.0 / 1.5);
        assert!((lorentz_norm(&v, &w, 1.5, 1.5).unwrap() - lp).abs() < 1e-14);
    }

    #[test]
    fn weak_norm_of_a_power() {
        // f(x) = x^{-1/p} on (0, 1] has ‖f‖_{p,∞} = 1.
        let n = 20_000;
        let p = 2.0;
        let w = vec![1.0 / n as f64; n];
        let v: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) / n as f64).powf(-1.0 / p)).collect();
        let got = lorentz_norm(&v, &w, p, f64::INFINITY).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn homogeneous_and_rearrangement_invariant(
            v in proptest::collection::vec(-5.0f64..5.0, 1..40),
            c in 0.1f64..10.0,
            sigma in prop_oneof![Just(f64::INFINITY), 0.5f64..4.0],
        ) {
            let w: Vec<f64> = (0..v.len()).map(|i| 0.5 + (i % 3) as f64).collect();
            let base = lorentz_norm(&v, &w, 1.7, sigma).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let twice = lorentz_norm(&scaled, &w, 1.7, sigma).unwrap();
            prop_assert!((twice - c * base).abs() <= 1e-10 * (c * base).max(1e-300));
            let mut rv = v.clone();
            let mut rw = w.clone();
            rv.reverse();
            rw.reverse();
            let rev = lorentz_norm(&rv, &rw, 1.7, sigma).unwrap();
            prop_assert!((rev - base).abs() <= 1e-12 * base.max(1e-300));
        }

        #[test]
        fn monotone_in_the_samples(v in proptest::collection::vec(0.0f64..5.0, 1..30), k in 0usize..30, bump in 0.0f64..3.0) {
            let w = vec![0.25; v.len()];
            let mut up = v.clone();
            let k = k % v.len();
            up[k] += bump;
            for sigma in [1.0, 2.0, f64::INFINITY] {
                let a = lorentz_norm(&v, &w, 2.0, sigma).unwrap();
                let b = lorentz_norm(&up, &w, 2.0, sigma).unwrap();
                prop_assert!(a <= b * (1.0 + 1e-12) + 1e-300);
            }
        }
    }
}
