//! Records of checked inequalities: left side, right-hand terms and the fitted constant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Smallest `c` with `lhs ≤ c · rhs`; `0` when `lhs ≤ 0`, `+∞` when `rhs = 0 < lhs`.
pub fn fitted_constant(lhs: f64, rhs: f64) -> f64 {
    if lhs.is_nan() || rhs.is_nan() {
        return f64::NAN;
    }
    if lhs <= 0.0 {
        return 0.0;
    }
    if rhs <= 0.0 {
        return f64::INFINITY;
    }
    let mut c = lhs / rhs;
    // Guard against rounding: the constant must actually dominate.
    while c * rhs < lhs {
        c = f64::from_bits(c.to_bits() + 1);
    }
    c
}

/// One evaluated instance of an inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub inequality_id: String,
    pub q: Option<f64>,
    pub t0: Option<f64>,
    pub x0: Vec<f64>,
    pub radius: Option<f64>,
    pub lhs: f64,
    pub rhs_terms: Vec<f64>,
    pub fitted_constant: f64,
    pub ceiling: Option<f64>,
    pub pass: bool,
}

impl ReportRow {
    /// Row with the fitted constant computed; passes while the constant is finite.
    pub fn new(inequality_id: &str, lhs: f64, rhs_terms: Vec<f64>) -> Self {
        let rhs: f64 = rhs_terms.iter().sum();
        let fitted = fitted_constant(lhs, rhs);
        Self {
            inequality_id: inequality_id.to_string(),
            q: None,
            t0: None,
            x0: Vec::new(),
            radius: None,
            lhs,
            rhs_terms,
            fitted_constant: fitted,
            ceiling: None,
            pass: fitted.is_finite(),
        }
    }

    pub fn with_q(mut self, q: f64) -> Self {
        self.q = Some(q);
        self
    }

    pub fn with_point(mut self, t0: f64, x0: &[f64]) -> Self {
        self.t0 = Some(t0);
        self.x0 = x0.to_vec();
        self
    }

    pub fn with_radius(mut self, r: f64) -> Self {
        self.radius = Some(r);
        self
    }

    /// Applies a ceiling: the row passes iff its fitted constant does not exceed it.
    pub fn with_ceiling(mut self, ceiling: f64) -> Self {
        self.ceiling = Some(ceiling);
        self.pass = self.fitted_constant <= ceiling;
        self
    }

    pub fn rhs(&self) -> f64 {
        self.rhs_terms.iter().sum()
    }
}

/// Outcome of one verification: rows, scalar diagnostics and failure reasons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub id: String,
    pub rows: Vec<ReportRow>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub failures: Vec<String>,
}

impl VerificationReport {
    pub fn new(id: &str) -> Self {
        Self { id: id.to_string(), rows: Vec::new(), metrics: BTreeMap::new(), notes: Vec::new(), failures: Vec::new() }
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn fail(&mut self, reason: impl Into<String>) {
        self.failures.push(reason.into());
    }

    /// Records a named tolerance check as a failure when it does not hold.
    pub fn require(&mut self, ok: bool, reason: impl Into<String>) {
        if !ok {
            self.fail(reason);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    /// Largest fitted constant over the rows (`0` without rows).
    pub fn max_fitted(&self) -> f64 {
        self.rows.iter().map(|r| r.fitted_constant).fold(0.0, f64::max)
    }

    pub fn apply_ceiling(&mut self, ceiling: f64) {
        for row in &mut self.rows {
            row.ceiling = Some(ceiling);
            row.pass = row.fitted_constant <= ceiling;
        }
    }

    /// Appends the rows, metrics (prefixed), notes and failures of another report.
    pub fn absorb(&mut self, other: VerificationReport) {
        for (k, v) in other.metrics {
            self.metrics.insert(format!("{}.{k}", other.id), v);
        }
        self.rows.extend(other.rows);
        self.notes.extend(other.notes);
        self.failures.extend(other.failures.into_iter().map(|f| format!("{}: {f}", other.id)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degenerate_sides() {
        assert_eq!(fitted_constant(0.0, 0.0), 0.0);
        assert_eq!(fitted_constant(-1.0, 2.0), 0.0);
        assert_eq!(fitted_constant(1.0, 0.0), f64::INFINITY);
        let row = ReportRow::new("x", 1.0, vec![0.0, 0.0]);
        assert!(!row.pass);
    }

    #[test]
    fn ceiling_decides_pass() {
        let mut rep = VerificationReport::new("demo");
        rep.push(ReportRow::new("demo", 3.0, vec![1.0, 0.5]));
        rep.apply_ceiling(1.9);
        assert!(!rep.passed());
        rep.apply_ceiling(2.0);
        assert!(rep.passed());
        rep.fail("extra");
        assert!(!rep.passed());
    }

    proptest! {
        #[test]
        fn fitted_constant_dominates(lhs in 1e-12f64..1e12, a in 1e-9f64..1e9, b in 0.0f64..1e9) {
            let row = ReportRow::new("p", lhs, vec![a, b]);
            prop_assert!(row.fitted_constant * row.rhs() >= lhs - 1e-12 * lhs);
            let resum: f64 = row.rhs_terms.iter().sum();
            prop_assert!((resum - row.rhs()).abs() <= 1e-12 * row.rhs());
        }
    }
}
