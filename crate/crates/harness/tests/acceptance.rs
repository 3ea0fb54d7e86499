//! Acceptance suite: one line per criterion. Run with `cargo test -p nldd-harness --test acceptance`.
//!
//! A criterion passes when all of its clauses hold. Clauses listed as known gaps are still
//! evaluated and reported as failing, but do not change the exit status.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nldd::evolution::{solve, DriftField, SolverConfig};
use nldd::field::ScalarField;
use nldd::grid::make_grid;
use nldd::heat_kernel::{estimate_kernel, exact_free_kernel, periodized_free_kernel, HeatKernelConfig};
use nldd::kernel::KernelSpec;
use nldd::measure::{Atom, MeasureData};
use nldd::potential::{riesz_potential, tail, PotentialOptions, TailOptions};
use nldd::report::VerificationReport;
use nldd::snapshot::{load_field, load_kernel, load_trajectory, save_field, save_kernel, save_trajectory};
use nldd_harness::campaign::{run_campaign, run_experiment, CampaignOptions, ExperimentReport};
use nldd_harness::config::{CampaignConfig, ExperimentConfig};
use nldd_harness::experiment::Experiment;
use nldd_harness::lorentz::target_exponent;

struct Clause {
    name: String,
    ok: bool,
    detail: String,
    known_gap: bool,
}

#[derive(Default)]
struct Outcome {
    clauses: Vec<Clause>,
}

impl Outcome {
    fn check(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.clauses.push(Clause { name: name.into(), ok, detail: detail.into(), known_gap: false });
    }

    fn known_gap(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.clauses.push(Clause { name: name.into(), ok, detail: detail.into(), known_gap: true });
    }

    fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.ok)
    }

    fn blocking(&self) -> bool {
        self.clauses.iter().any(|c| !c.ok && !c.known_gap)
    }
}

type Run = fn() -> Result<Outcome, String>;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Result<CampaignConfig, String> {
    CampaignConfig::load(&configs().join(name)).map_err(|e| e.to_string())
}

fn experiment<'a>(c: &'a CampaignConfig, name: &str) -> Result<&'a ExperimentConfig, String> {
    c.experiments.iter().find(|e| e.name == name).ok_or_else(|| format!("no experiment {name}"))
}

fn report<'a>(e: &'a ExperimentReport, id: &str) -> Result<&'a VerificationReport, String> {
    e.reports.iter().find(|r| r.id == id).ok_or_else(|| format!("{}: no {id} report", e.name))
}

fn metric(r: &VerificationReport, key: &str) -> Result<f64, String> {
    r.get(key).ok_or_else(|| format!("{}: no metric {key}", r.id))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn median(v: &[f64]) -> f64 {
    let mut w = v.to_vec();
    w.sort_by(f64::total_cmp);
    let n = w.len();
    if n % 2 == 1 {
        w[n / 2]
    } else {
        0.5 * (w[n / 2 - 1] + w[n / 2])
    }
}

/// Largest deviation from the median, relative to the median.
fn spread_about_median(v: &[f64]) -> f64 {
    let m = median(v);
    v.iter().map(|x| rel(*x, m)).fold(0.0, f64::max)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

fn c1_solver_exactness() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let clock = Instant::now();
    let g = make_grid(2, 64, 2.0 * PI).map_err(|e| e.to_string())?;
    for s in [0.5, 0.75] {
        let kernel = KernelSpec::new(2, s).map_err(|e| e.to_string())?;
        let u0 = ScalarField::from_fn(g, 0.0, |x| x[0].sin() + (3.0 * x[1]).cos());
        let config = SolverConfig::new(kernel, 1e-3, 1.0).with_stride(1000);
        let traj = solve(&u0, &DriftField::Zero, &MeasureData::empty(), &config).map_err(|e| e.to_string())?;
        let last = traj.last();
        // The symbol of the operator is |k|^{2s}.
        let exact = ScalarField::from_fn(g, 1.0, |x| {
            (-1.0f64).exp() * x[0].sin() + (-(3f64.powf(2.0 * s))).exp() * (3.0 * x[1]).cos()
        });
        let err = last.max_diff(&exact) / exact.max_abs();
        out.check(&format!("s={s}"), err <= 1e-6 && (last.time() - 1.0).abs() < 1e-12, format!("rel err {err:.2e}"));
    }
    let secs = clock.elapsed().as_secs_f64();
    out.check("runtime", secs <= 10.0, format!("{secs:.1}s"));
    Ok(out)
}

fn c2_poisson_kernel() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let clock = Instant::now();
    let g = make_grid(2, 256, 16.0).map_err(|e| e.to_string())?;
    let kernel = KernelSpec::new(2, 0.5).map_err(|e| e.to_string())?;
    let y = [8.0, 8.0];
    let est = estimate_kernel(&DriftField::Zero, &kernel, &g, 0.0, &y, &[1.0], &HeatKernelConfig::new(0.01))
        .map_err(|e| e.to_string())?;
    let p = &est.fields[0];
    let at = |i: i64, j: i64| p.samples()[g.flat_index_wrapped(&[i, j])];
    let (center, one) = (at(128, 128), at(144, 128));
    let e0 = rel(center, 0.159155);
    let e1 = rel(one, 0.056270);
    out.check("p(x=y)", e0 <= 0.02, format!("{center:.6} ({:.2}%)", 100.0 * e0));
    out.check("p(|x-y|=1)", e1 <= 0.02, format!("{one:.6} ({:.2}%)", 100.0 * e1));

    let periodized = periodized_free_kernel(&kernel, &g, 1.0, &y).map_err(|e| e.to_string())?;
    let mut worst_free = 0.0f64;
    let mut worst_periodized = 0.0f64;
    for i in 0..g.len() {
        let v = p.samples()[i];
        if v < 1e-3 {
            continue;
        }
        let x = g.point(i);
        let disp = g.displacement(&x[..2], &y);
        let exact = exact_free_kernel(&kernel, 1.0, &disp[..2]).map_err(|e| e.to_string())?;
        worst_free = worst_free.max(rel(v, exact));
        worst_periodized = worst_periodized.max(rel(v, periodized.samples()[i]));
    }
    out.check(
        "periodized closed form where p >= 1e-3",
        worst_periodized <= 0.02,
        format!("{:.2}%", 100.0 * worst_periodized),
    );
    // Periodic images add a background of order 1/L^2 = 4e-3, comparable to the 1e-3 floor.
    out.known_gap(
        "free-space closed form where p >= 1e-3",
        worst_free <= 0.02,
        format!("{:.1}% (periodic images)", 100.0 * worst_free),
    );
    let secs = clock.elapsed().as_secs_f64();
    out.check("runtime", secs <= 120.0, format!("{secs:.1}s"));
    Ok(out)
}

fn c3_upper_bound_shape() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let c = load("heat_kernel.toml")?;
    let mut constants = Vec::new();
    for name in ["hk-shear-128", "hk-shear-256"] {
        let cfg = experiment(&c, name)?;
        let exp = Experiment::build(cfg, c.seed).map_err(|e| e.to_string())?;
        let sup = exp.drift.at(&exp.grid, 0.0).map_err(|e| e.to_string())?.max_norm();
        out.check(&format!("{name} |b| <= 1"), sup <= 1.0 + 1e-12, format!("{sup:.3}"));
        let e = run_experiment(cfg, c.seed);
        let r = report(&e, "heat_kernel")?;
        out.check(&format!("{name} sanity"), r.passed(), r.failures.join("; "));
        let per_time: Vec<f64> =
            r.rows.iter().filter(|row| row.inequality_id == "upper_bound").map(|row| row.fitted_constant).collect();
        out.check(&format!("{name} times"), per_time.len() == 3, format!("{} rows", per_time.len()));
        constants.extend(per_time);
    }
    let finite = constants.iter().all(|v| v.is_finite() && *v > 0.0);
    let spread = spread_about_median(&constants);
    out.check("finite", finite, fmt_list(&constants));
    out.check("within 30% of the median", spread <= 0.30, format!("{:.1}%", 100.0 * spread));
    Ok(out)
}

fn c4_gluing() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let c = load("heat_kernel.toml")?;
    let e = run_experiment(experiment(&c, "hk-gluing")?, c.seed);
    let r = report(&e, "heat_kernel")?;
    out.check("report", r.passed(), r.failures.join("; "));
    for (label, key) in [("c", "c_rho"), ("C", "big_c_rho")] {
        let vs = ["0.5", "1", "2"]
            .iter()
            .map(|rho| metric(r, &format!("gluing.{key}_{rho}")))
            .collect::<Result<Vec<_>, _>>()?;
        let ok = vs.iter().all(|v| v.is_finite() && *v > 0.0);
        let spread = spread_about_median(&vs);
        out.check(&format!("{label} finite"), ok, fmt_list(&vs));
        out.check(&format!("{label} within 50%"), spread <= 0.5, format!("{:.1}%", 100.0 * spread));
    }
    let agreement = metric(r, "gluing.agreement_rho_2")?;
    out.check("p vs p^rho at rho = L/4", agreement <= 0.01, format!("{:.2}%", 100.0 * agreement));
    Ok(out)
}

fn potential_rows(outcome: &nldd_harness::campaign::CampaignOutcome) -> Vec<&nldd::report::ReportRow> {
    outcome
        .report
        .experiments
        .iter()
        .flat_map(|e| &e.reports)
        .flat_map(|r| &r.rows)
        .filter(|row| row.inequality_id == "potential_estimate")
        .collect()
}

fn c5_potential_estimate() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let c = load("potential.toml")?;
    let dir = tempdir()?;
    let ceilings = dir.path().join("ceilings.json");
    let run = |sub: &str, seed: Option<u64>| {
        let opts =
            CampaignOptions { seed, out_dir: dir.path().join(sub), ceiling_file: Some(ceilings.clone()), input: None };
        run_campaign(&c, &opts).map_err(|e| e.to_string())
    };
    let first = run("first", None)?;
    out.check("first run", first.passed(), first.failing_ids().join(", "));
    let frozen = first.report.ceilings.get("potential_estimate").copied().unwrap_or(f64::NAN);
    let max_first = potential_rows(&first).iter().map(|r| r.fitted_constant).fold(0.0, f64::max);
    out.check("ceiling is twice the first fit", frozen == 2.0 * max_first, format!("c* = {frozen:.4}"));
    out.check("ceiling file written", ceilings.exists(), "");

    let second = run("second", None)?;
    let rows = potential_rows(&second);
    let names: Vec<&str> = second.report.experiments.iter().map(|e| e.name.as_str()).collect();
    out.check("10 placements x 3 q x 3 drifts", rows.len() == 90 && names.len() == 3, format!("{} rows", rows.len()));
    let single = rows.iter().all(|r| r.ceiling == Some(frozen) && r.pass);
    out.check("rerun under c*", single && second.passed(), second.failing_ids().join(", "));

    let fresh = run("fresh-seed", Some(c.seed + 1))?;
    let ok = potential_rows(&fresh).iter().all(|r| r.ceiling == Some(frozen) && r.pass);
    out.check("new seed under c*", ok && fresh.passed(), fresh.failing_ids().join(", "));

    for e in &first.report.experiments {
        let r = report(e, "potential_estimate")?;
        if e.name.contains("sqg") {
            continue;
        }
        let h = metric(r, "homogeneity_rel_diff")?;
        out.check(&format!("{} homogeneity", e.name), h <= 1e-10, format!("{h:.1e}"));
    }
    Ok(out)
}

fn c6_excess_decay() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let c = load("excess.toml")?;
    let homogeneous = experiment(&c, "excess-sqg")?;
    let atoms = experiment(&c, "excess-atoms")?;
    let mut alphas = Vec::new();
    for seed in 1..=5u64 {
        let e = run_experiment(homogeneous, seed);
        let r = report(&e, "excess_decay")?;
        let alpha = metric(r, "alpha")?;
        out.check(&format!("seed {seed}"), r.passed() && alpha > 0.0, format!("alpha {alpha:.4}"));
        alphas.push(alpha);
        let e = run_experiment(atoms, seed);
        let r = report(&e, "excess_decay")?;
        let rows_ok = !r.rows.is_empty() && r.rows.iter().all(|row| row.pass && row.rhs_terms[1] > 0.0);
        out.check(&format!("seed {seed} atoms"), r.passed() && rows_ok, r.failures.join("; "));
    }
    let m = median(&alphas);
    let dev = alphas.iter().map(|a| (a - m).abs()).fold(0.0, f64::max);
    out.check("alpha within 0.05 of the median", dev <= 0.05, format!("{} (dev {dev:.3})", fmt_list(&alphas)));
    Ok(out)
}

fn c7_comparison() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let c = load("comparison.toml")?;
    let dir = tempdir()?;
    let opts = CampaignOptions { out_dir: dir.path().to_path_buf(), ..Default::default() };
    let outcome = run_campaign(&c, &opts).map_err(|e| e.to_string())?;
    let r = report(&outcome.report.experiments[0], "comparison")?;
    let lin = metric(r, "linearity_max_dev")?;
    out.check("linear in mass", lin <= 0.10, format!("{:.2e}", lin));
    let ceiling = outcome.report.ceilings.get("comparison").copied();
    let single = r.rows.iter().all(|row| row.ceiling == ceiling && row.pass && row.fitted_constant.is_finite());
    out.check("5 cylinders x 3 masses", r.rows.len() == 15, format!("{} rows", r.rows.len()));
    out.check("single ceiling", single && outcome.passed(), format!("c = {:.4}", metric(r, "fitted_c")?));
    Ok(out)
}

fn c8_quadrature() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let g = make_grid(2, 64, 2.0 * PI).map_err(|e| e.to_string())?;
    let one = ScalarField::constant(g, 1.0, 0.0);
    let opts = TailOptions::for_grid(&g, 0.5);
    let got = tail(&one, &[1.0, 2.0], 1.0, &opts).map_err(|e| e.to_string())?;
    let want = 2.0 * PI * (1.0 - 1.0 / opts.truncation_radius);
    out.check("constant tail", rel(got, want) <= 1e-6, format!("{got:.9} vs {want:.9}"));

    let kernel = KernelSpec::new(2, 0.5).map_err(|e| e.to_string())?;
    let eps = 0.01;
    let mu = MeasureData::from_atoms(vec![Atom::new(1.0 - eps, &[0.0, 0.0], 1.0)]).map_err(|e| e.to_string())?;
    let p = riesz_potential(&mu, 1.0, &[0.0, 0.0], 1.0, &kernel, 1.0, &PotentialOptions::default())
        .map_err(|e| e.to_string())?;
    let want = (eps.powf(-2.0) - 1.0) / 2.0;
    out.check("atom potential", rel(p.value, want) <= 1e-4 && want == 4999.5, format!("{:.4}", p.value));
    Ok(out)
}

fn c9_slanted() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let c = load("bmo.toml")?;
    let dir = tempdir()?;
    let opts = CampaignOptions { out_dir: dir.path().to_path_buf(), ..Default::default() };
    let outcome = run_campaign(&c, &opts).map_err(|e| e.to_string())?;
    let by_name = |n: &str| outcome.report.experiments.iter().find(|e| e.name == n).ok_or(format!("no {n}"));

    let r = report(by_name("bmo-constant")?, "bmo_slanted")?;
    let diff = metric(r, "slanted_straight_rel_diff")?;
    out.check("constant drift coincidence", diff <= 1e-6 && r.passed(), format!("{diff:.1e}"));

    let r = report(by_name("bmo-lacunary")?, "bmo_slanted")?;
    let ceiling = outcome.report.ceilings.get("potential_estimate_slanted").copied();
    let rows: Vec<_> = r.rows.iter().filter(|row| row.inequality_id == "potential_estimate_slanted").collect();
    let ok = !rows.is_empty() && rows.iter().all(|row| row.pass && row.ceiling == ceiling);
    out.check("lacunary slanted potential", ok, format!("{} rows, c = {:.4}", rows.len(), metric(r, "fitted_c")?));
    let residual = metric(r, "path_fit_residual")?;
    out.check(
        "path norm fit",
        residual <= 0.10,
        format!(
            "{:.1}% with A = {:.3}, B = {:.3}",
            100.0 * residual,
            metric(r, "path_fit_a")?,
            metric(r, "path_fit_b")?
        ),
    );
    out.check("report", r.passed(), r.failures.join("; "));
    Ok(out)
}

fn c10_lorentz() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let target = target_exponent(2, 0.5, 1.2).map_err(|e| e.to_string())?;
    out.check("target exponent", target == 2.0, format!("{target:?}"));
    let c = load("lorentz.toml")?;
    let mut norms = Vec::new();
    for name in ["lorentz-64", "lorentz-128"] {
        let e = run_experiment(experiment(&c, name)?, c.seed);
        let r = report(&e, "lorentz")?;
        let v = metric(r, "u_norm")?;
        out.check(name, v.is_finite() && r.passed() && metric(r, "target_exponent")? == 2.0, format!("{v:.4}"));
        norms.push(v);
    }
    let change = rel(norms[1], norms[0]);
    out.check("refinement", change <= 0.30, format!("{:.1}%", 100.0 * change));
    Ok(out)
}

fn c11_determinism() -> Result<Outcome, String> {
    let mut out = Outcome::default();
    let c = load("smoke.toml")?;
    let dir = tempdir()?;
    let mut bodies = Vec::new();
    for sub in ["a", "b"] {
        let opts = CampaignOptions { out_dir: dir.path().join(sub), ..Default::default() };
        let outcome = run_campaign(&c, &opts).map_err(|e| e.to_string())?;
        bodies.push(std::fs::read(&outcome.csv_path).map_err(|e| e.to_string())?);
    }
    out.check("identical CSV", bodies[0] == bodies[1] && bodies[0].len() > 200, format!("{} bytes", bodies[0].len()));

    let exp = Experiment::build(&c.experiments[0], 13).map_err(|e| e.to_string())?;
    let traj = exp.solve().map_err(|e| e.to_string())?;
    let path = dir.path().join("t.traj");
    save_trajectory(&path, &traj, exp.s()).map_err(|e| e.to_string())?;
    let (back, s) = load_trajectory(&path).map_err(|e| e.to_string())?;
    let same = s.to_bits() == exp.s().to_bits()
        && back.len() == traj.len()
        && back.snapshots().iter().zip(traj.snapshots()).all(|(a, b)| {
            a.time().to_bits() == b.time().to_bits()
                && a.samples().iter().zip(b.samples()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    out.check("trajectory roundtrip", same, format!("{} snapshots", traj.len()));

    let field = traj.last();
    let fpath = dir.path().join("u.field");
    save_field(&fpath, field, exp.s()).map_err(|e| e.to_string())?;
    let snap = load_field(&fpath).map_err(|e| e.to_string())?;
    let same = snap.field.samples().iter().zip(field.samples()).all(|(x, y)| x.to_bits() == y.to_bits());
    out.check("field roundtrip", same && snap.field.time().to_bits() == field.time().to_bits(), "");

    let est = estimate_kernel(
        &exp.drift,
        &exp.kernel,
        &exp.grid,
        0.0,
        &[1.0, 1.0],
        &[1.6, 2.0],
        &HeatKernelConfig::new(0.02),
    )
    .map_err(|e| e.to_string())?;
    let kpath = dir.path().join("k.hk");
    save_kernel(&kpath, &est).map_err(|e| e.to_string())?;
    let k = load_kernel(&kpath).map_err(|e| e.to_string())?;
    let same = k
        .fields
        .iter()
        .zip(&est.fields)
        .all(|(a, b)| a.samples().iter().zip(b.samples()).all(|(x, y)| x.to_bits() == y.to_bits()))
        && k.fields.len() == est.fields.len();
    out.check("kernel roundtrip", same, "");
    Ok(out)
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, Run); 11] = [
        ("C1", "spectral solver exactness", c1_solver_exactness),
        ("C2", "Poisson kernel oracle", c2_poisson_kernel),
        ("C3", "upper bound shape", c3_upper_bound_shape),
        ("C4", "gluing lemma", c4_gluing),
        ("C5", "potential estimate", c5_potential_estimate),
        ("C6", "excess decay", c6_excess_decay),
        ("C7", "comparison estimate", c7_comparison),
        ("C8", "quadrature oracles", c8_quadrature),
        ("C9", "slanted machinery", c9_slanted),
        ("C10", "Lorentz exponent", c10_lorentz),
        ("C11", "determinism and persistence", c11_determinism),
    ];
    let mut blocking = Vec::new();
    for (id, title, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let clock = Instant::now();
        let result = run();
        let secs = clock.elapsed().as_secs_f64();
        match result {
            Ok(outcome) => {
                let status = if outcome.passed() {
                    "PASS"
                } else if outcome.blocking() {
                    "FAIL"
                } else {
                    "FAIL (known gap)"
                };
                let summary: Vec<String> = outcome
                    .clauses
                    .iter()
                    .map(|c| {
                        let mark = if c.ok { "ok" } else { "FAILED" };
                        if c.detail.is_empty() {
                            format!("{} {mark}", c.name)
                        } else {
                            format!("{} {mark} [{}]", c.name, c.detail)
                        }
                    })
                    .collect();
                println!("{id:<4} {status:<16} {title} ({secs:.1}s): {}", summary.join("; "));
                if outcome.blocking() {
                    blocking.push(id);
                }
            }
            Err(e) => {
                println!("{id:<4} {:<16} {title} ({secs:.1}s): error: {e}", "FAIL");
                blocking.push(id);
            }
        }
    }
    if blocking.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing criteria: {}", blocking.join(", "));
        ExitCode::FAILURE
    }
}
