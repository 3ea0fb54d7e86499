//! Running a campaign: experiments in parallel, ceilings, CSV and JSON reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nldd::evolution::TrajectoryStore;
use nldd::report::{ReportRow, VerificationReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CampaignConfig, ExperimentConfig, VerifySelection};
use crate::experiment::Experiment;
use crate::verify;
use crate::{HarnessError, Result};

pub const CSV_HEADER: [&str; 12] = [
    "inequality_id",
    "q",
    "t0",
    "x0_coords",
    "radius",
    "lhs",
    "rhs_term_1",
    "rhs_term_2",
    "rhs_term_3",
    "fitted_constant",
    "ceiling",
    "pass",
];

/// Slack applied when freezing first-run fitted constants as ceilings.
pub const FREEZE_SLACK: f64 = 2.0;

/// The checks a selection can contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Potential,
    Excess,
    Holder,
    Lorentz,
    Comparison,
    BmoSlanted,
    HeatKernel,
}

impl Check {
    pub const ALL: [Check; 7] = [
        Check::Potential,
        Check::Excess,
        Check::Holder,
        Check::Lorentz,
        Check::Comparison,
        Check::BmoSlanted,
        Check::HeatKernel,
    ];
}

/// Drops every check not listed.
pub fn restrict(selection: &VerifySelection, keep: &[Check]) -> VerifySelection {
    let has = |c: Check| keep.contains(&c);
    VerifySelection {
        potential: selection.potential.clone().filter(|_| has(Check::Potential)),
        excess: selection.excess.clone().filter(|_| has(Check::Excess)),
        holder: selection.holder.clone().filter(|_| has(Check::Holder)),
        lorentz: selection.lorentz.clone().filter(|_| has(Check::Lorentz)),
        comparison: selection.comparison.clone().filter(|_| has(Check::Comparison)),
        bmo_slanted: selection.bmo_slanted.clone().filter(|_| has(Check::BmoSlanted)),
        heat_kernel: selection.heat_kernel.clone().filter(|_| has(Check::HeatKernel)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub reports: Vec<VerificationReport>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(VerificationReport::passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the canonical (re-serialized) configuration.
    pub config_sha256: String,
    /// Git-style object id of the input file: SHA-256 of `"blob <len>\0" + bytes`.
    pub input_blob_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub provenance: Provenance,
    pub passed: bool,
    pub experiments: Vec<ExperimentReport>,
    pub ceilings: BTreeMap<String, f64>,
}

pub fn blob_id(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn needs_trajectory(sel: &VerifySelection) -> bool {
    sel.potential.is_some()
        || sel.excess.is_some()
        || sel.holder.is_some()
        || sel.lorentz.is_some()
        || sel.comparison.is_some()
        || sel.bmo_slanted.is_some()
}

fn failed(id: &str, err: &HarnessError) -> VerificationReport {
    let mut r = VerificationReport::new(id);
    r.fail(err.to_string());
    r
}

fn with_ceiling(mut report: VerificationReport, ceiling: Option<f64>) -> VerificationReport {
    if let Some(c) = ceiling {
        for row in report.rows.iter_mut().filter(|r| r.ceiling.is_none()) {
            *row = row.clone().with_ceiling(c);
        }
    }
    report
}

/// Runs the selected verifications of one experiment. Errors become failed reports, so the
/// remaining checks still run and their rows are kept.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> ExperimentReport {
    let sel = &cfg.verify;
    let mut reports = Vec::new();
    if sel.is_empty() {
        return ExperimentReport { name: cfg.name.clone(), reports };
    }
    let exp = match Experiment::build(cfg, seed) {
        Ok(e) => e,
        Err(e) => {
            reports.push(failed("experiment", &e));
            return ExperimentReport { name: cfg.name.clone(), reports };
        }
    };
    let traj: Option<std::result::Result<TrajectoryStore, String>> =
        needs_trajectory(sel).then(|| exp.solve().map_err(|e| e.to_string()));
    let traj_ref = |id: &str| -> Result<&TrajectoryStore> {
        match traj.as_ref() {
            Some(Ok(t)) => Ok(t),
            Some(Err(m)) => Err(HarnessError::Config(format!("solve failed before {id}: {m}"))),
            None => unreachable!("trajectory requested without a selection"),
        }
    };
    let mut run = |id: &str, ceiling: Option<f64>, f: &dyn Fn() -> Result<VerificationReport>| {
        reports.push(match f() {
            Ok(r) => with_ceiling(r, ceiling),
            Err(e) => failed(id, &e),
        });
    };
    if let Some(c) = &sel.potential {
        run("potential_estimate", c.ceiling, &|| verify::potential_estimate(&exp, traj_ref("potential")?, c));
    }
    if let Some(c) = &sel.excess {
        run("excess_decay", None, &|| verify::excess_decay(&exp, traj_ref("excess")?, c));
    }
    if let Some(c) = &sel.holder {
        run("holder", c.ceiling, &|| verify::holder(&exp, traj_ref("holder")?, c));
    }
    if let Some(c) = &sel.lorentz {
        run("lorentz", c.ceiling, &|| verify::lorentz(&exp, traj_ref("lorentz")?, c));
    }
    if let Some(c) = &sel.comparison {
        run("comparison", c.ceiling, &|| verify::comparison(&exp, traj_ref("comparison")?, c));
    }
    if let Some(c) = &sel.bmo_slanted {
        run("bmo_slanted", c.ceiling, &|| verify::bmo_slanted(&exp, traj_ref("bmo_slanted")?, c));
    }
    if let Some(c) = &sel.heat_kernel {
        run("heat_kernel", c.ceiling, &|| verify::heat_kernel(&exp, c));
    }
    ExperimentReport { name: cfg.name.clone(), reports }
}

/// Reads a ceiling file (a JSON object from inequality id to ceiling); missing files are empty.
pub fn load_ceilings(path: &Path) -> Result<BTreeMap<String, f64>> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(HarnessError::Io(path.display().to_string(), e)),
    }
}

/// Applies stored ceilings to rows still without one, and freezes the remaining ids at
/// `FREEZE_SLACK ×` their largest finite fitted constant. Returns the newly frozen ceilings.
pub fn resolve_ceilings(experiments: &mut [ExperimentReport], stored: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let mut fresh: BTreeMap<String, f64> = BTreeMap::new();
    for row in experiments.iter().flat_map(|e| &e.reports).flat_map(|r| &r.rows) {
        if row.ceiling.is_none() && !stored.contains_key(&row.inequality_id) {
            let entry = fresh.entry(row.inequality_id.clone()).or_insert(0.0);
            if row.fitted_constant.is_finite() {
                *entry = entry.max(FREEZE_SLACK * row.fitted_constant);
            }
        }
    }
    for row in experiments.iter_mut().flat_map(|e| &mut e.reports).flat_map(|r| &mut r.rows) {
        if row.ceiling.is_none() {
            let c = stored.get(&row.inequality_id).or_else(|| fresh.get(&row.inequality_id)).copied();
            if let Some(c) = c {
                *row = row.clone().with_ceiling(c);
            }
        }
    }
    fresh
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_record(row: &ReportRow) -> Vec<String> {
    let term = |k: usize| row.rhs_terms.get(k).map(|v| v.to_string()).unwrap_or_default();
    vec![
        row.inequality_id.clone(),
        opt(row.q),
        opt(row.t0),
        row.x0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
        opt(row.radius),
        row.lhs.to_string(),
        term(0),
        term(1),
        term(2),
        row.fitted_constant.to_string(),
        opt(row.ceiling),
        row.pass.to_string(),
    ]
}

/// The CSV report body for all rows, in experiment and check order.
pub fn csv_bytes(experiments: &[ExperimentReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(|e| HarnessError::Output(e.to_string()))?;
    for row in experiments.iter().flat_map(|e| &e.reports).flat_map(|r| &r.rows) {
        w.write_record(csv_record(row)).map_err(|e| HarnessError::Output(e.to_string()))?;
    }
    w.into_inner().map_err(|e| HarnessError::Output(e.to_string()))
}

#[derive(Debug, Clone, Default)]
pub struct CampaignOptions {
    /// Overrides the seed of the configuration.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Defaults to `ceilings.json` in the output directory.
    pub ceiling_file: Option<PathBuf>,
    /// Raw bytes of the configuration file, for the provenance blob id.
    pub input: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub report: CampaignReport,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

impl CampaignOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed
    }

    /// Ids of failing rows and reports, each once.
    pub fn failing_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for e in &self.report.experiments {
            for r in &e.reports {
                for row in r.rows.iter().filter(|row| !row.pass) {
                    if !ids.contains(&row.inequality_id) {
                        ids.push(row.inequality_id.clone());
                    }
                }
                if !r.failures.is_empty() && !ids.contains(&r.id) {
                    ids.push(r.id.clone());
                }
            }
        }
        ids
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::Io(path.display().to_string(), e))
}

/// Runs every experiment, resolves ceilings, and writes `report.csv`, `report.json` and the
/// timestamp sidecar `report.timestamps.json` into the output directory.
pub fn run_campaign(config: &CampaignConfig, opts: &CampaignOptions) -> Result<CampaignOutcome> {
    fs::create_dir_all(&opts.out_dir).map_err(|e| HarnessError::Io(opts.out_dir.display().to_string(), e))?;
    let seed = opts.seed.unwrap_or(config.seed);
    let started = SystemTime::now();
    let clock = Instant::now();
    let timed: Vec<(ExperimentReport, f64)> = config
        .experiments
        .par_iter()
        .map(|e| {
            let t = Instant::now();
            let r = run_experiment(e, seed);
            (r, t.elapsed().as_secs_f64())
        })
        .collect();
    let durations: Vec<(String, f64)> = timed.iter().map(|(r, t)| (r.name.clone(), *t)).collect();
    let mut experiments: Vec<ExperimentReport> = timed.into_iter().map(|(r, _)| r).collect();

    let ceiling_path = opts.ceiling_file.clone().unwrap_or_else(|| opts.out_dir.join("ceilings.json"));
    let mut ceilings = load_ceilings(&ceiling_path)?;
    let fresh = resolve_ceilings(&mut experiments, &ceilings);
    let passed = experiments.iter().all(ExperimentReport::passed);
    if !fresh.is_empty() && passed {
        // Only a fully passing run may establish a regression baseline.
        ceilings.extend(fresh.clone());
        let text = serde_json::to_string_pretty(&ceilings).map_err(|e| HarnessError::Output(e.to_string()))?;
        write(&ceiling_path, text.as_bytes())?;
    } else {
        ceilings.extend(fresh);
    }

    let canonical = CampaignConfig { seed, ..config.clone() }.to_toml();
    let input = opts.input.clone().unwrap_or_else(|| canonical.clone().into_bytes());
    let report = CampaignReport {
        provenance: Provenance {
            seed,
            config_sha256: hex(&Sha256::digest(canonical.as_bytes())),
            input_blob_id: blob_id(&input),
        },
        passed,
        experiments,
        ceilings,
    };
    let csv_path = opts.out_dir.join("report.csv");
    let json_path = opts.out_dir.join("report.json");
    write(&csv_path, &csv_bytes(&report.experiments)?)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Output(e.to_string()))?;
    write(&json_path, json.as_bytes())?;
    let stamps = serde_json::json!({
        "started_unix": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "experiments": durations.iter().map(|(n, t)| serde_json::json!({ "name": n, "seconds": t })).collect::<Vec<_>>(),
    });
    write(&opts.out_dir.join("report.timestamps.json"), stamps.to_string().as_bytes())?;
    Ok(CampaignOutcome { report, csv_path, json_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FAST: &str = r#"
seed = 9

[[experiment]]
name = "eigen"
grid = { d = 2, n = 32 }
kernel = { s = 0.5 }
initial = { kind = "modes", terms = [{ mode = [1, 0], sin = 1.0 }] }
solver = { dt = 0.02, t_end = 1.0, stride = 5 }

[experiment.verify.potential]
placements = 3
q = [2.0]
radius_min = 0.4
radius_max = 0.8
"#;

    #[test]
    fn git_style_blob_id() {
        // Equals `git hash-object` in a repository using SHA-256 object ids.
        assert_eq!(blob_id(b"hello"), "8aec4e4876f854f688d0ebfc8f37598f38e5fd6903cccc850ca36591175aeb60");
        assert_eq!(blob_id(b"").len(), 64);
        assert_ne!(blob_id(b"a"), blob_id(b"b"));
    }

    #[test]
    fn empty_selection_writes_only_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CampaignConfig::from_toml("seed = 1\n").unwrap();
        let out = run_campaign(&cfg, &CampaignOptions { out_dir: dir.path().into(), ..Default::default() }).unwrap();
        assert!(out.passed());
        let text = fs::read_to_string(out.csv_path).unwrap();
        assert_eq!(text, CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn freezing_then_rerunning_passes_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CampaignConfig::from_toml(FAST).unwrap();
        let opts = CampaignOptions { out_dir: dir.path().into(), ..Default::default() };
        let first = run_campaign(&cfg, &opts).unwrap();
        assert!(first.passed());
        let frozen = load_ceilings(&dir.path().join("ceilings.json")).unwrap();
        let c = frozen["potential_estimate"];
        let body1 = fs::read(&first.csv_path).unwrap();
        let second = run_campaign(&cfg, &opts).unwrap();
        assert!(second.passed());
        assert_eq!(load_ceilings(&dir.path().join("ceilings.json")).unwrap()["potential_estimate"], c);
        assert_eq!(body1, fs::read(&second.csv_path).unwrap());
        let json: CampaignReport = serde_json::from_slice(&fs::read(&second.json_path).unwrap()).unwrap();
        assert_eq!(json.provenance.seed, 9);
    }

    #[test]
    fn a_failing_ceiling_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let text = FAST.replace("radius_max = 0.8", "radius_max = 0.8\nceiling = 1e-9");
        let cfg = CampaignConfig::from_toml(&text).unwrap();
        let out = run_campaign(&cfg, &CampaignOptions { out_dir: dir.path().into(), ..Default::default() }).unwrap();
        assert!(!out.passed());
        assert_eq!(out.failing_ids(), vec!["potential_estimate".to_string()]);
        let csv = fs::read_to_string(&out.csv_path).unwrap();
        assert!(csv.lines().skip(1).all(|l| l.starts_with("potential_estimate,") && l.ends_with(",false")));
        assert!(!dir.path().join("ceilings.json").exists());
    }

    #[test]
    fn errors_become_failed_reports() {
        let text = FAST.replace("radius_max = 0.8", "radius_max = 9.0");
        let cfg = CampaignConfig::from_toml(&text).unwrap();
        let r = run_experiment(&cfg.experiments[0], 0);
        assert!(!r.passed());
        assert!(r.reports[0].failures[0].contains("L/2"));
    }

    #[test]
    fn stored_ceilings_take_precedence_over_freezing() {
        let mut exps = vec![ExperimentReport {
            name: "x".into(),
            reports: vec![{
                let mut r = VerificationReport::new("v");
                r.push(ReportRow::new("a", 2.0, vec![1.0]));
                r.push(ReportRow::new("b", 3.0, vec![1.0]));
                r.push(ReportRow::new("c", 1.0, vec![1.0]).with_ceiling(0.5));
                r
            }],
        }];
        let stored = BTreeMap::from([("a".to_string(), 1.5)]);
        let fresh = resolve_ceilings(&mut exps, &stored);
        assert_eq!(fresh, BTreeMap::from([("b".to_string(), 6.0)]));
        let rows = &exps[0].reports[0].rows;
        assert_eq!(rows.iter().map(|r| r.pass).collect::<Vec<_>>(), vec![false, true, false]);
        assert_eq!(rows[2].ceiling, Some(0.5));
    }
}
