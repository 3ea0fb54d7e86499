//! End-to-end runs of the `nldd` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn nldd(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nldd")).args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned() + &String::from_utf8_lossy(&o.stderr)
}

#[test]
fn verify_writes_reports_and_freezes_ceilings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let o = nldd(&["verify", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    for f in ["report.csv", "report.json", "report.timestamps.json", "ceilings.json"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with(
        "inequality_id,q,t0,x0_coords,radius,lhs,rhs_term_1,rhs_term_2,rhs_term_3,fitted_constant,ceiling,pass"
    ));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));

    let ceilings: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ceilings.json")).unwrap()).unwrap();
    assert!(ceilings.get("potential_estimate").is_some());

    // A ceiling below every fitted constant makes the rerun fail with exit status 1.
    let strict = dir.path().join("strict.json");
    std::fs::write(&strict, r#"{"potential_estimate": 1e-9, "comparison": 1e-9}"#).unwrap();
    let o = nldd(
        &["verify", "--config", cfg.to_str().unwrap(), "--ceiling-file", strict.to_str().unwrap()],
        &dir.path().join("strict"),
    );
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("failing: potential_estimate"));
}

#[test]
fn potential_subcommand_runs_only_potential_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = nldd(&["potential", "--config", smoke().to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("potential_estimate,")));
}

#[test]
fn solve_then_describe_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let o = nldd(&["solve", "--config", smoke().to_str().unwrap(), "--seed", "13"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let traj = dir.path().join("smoke-shear.traj");
    assert!(traj.exists());
    let o = nldd(&["snapshot", traj.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("trajectory: d = 2, n = 32"));
}

#[test]
fn errors_exit_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = nldd(&["verify"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("--config is required"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[[experiment]]\nname = \"x\"\nbogus = 3\n").unwrap();
    let o = nldd(&["verify", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = nldd(&["snapshot", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
