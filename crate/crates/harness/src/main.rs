use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use nldd::heat_kernel::{estimate_kernel, HeatKernelConfig};
use nldd::snapshot::{load_field, load_kernel, load_trajectory, save_kernel, save_trajectory};
use nldd_harness::campaign::{restrict, run_campaign, CampaignOptions, Check};
use nldd_harness::config::{CampaignConfig, DriftSpec};
use nldd_harness::experiment::Experiment;

#[derive(Parser)]
#[command(name = "nldd", about = "Nonlocal drift-diffusion solver and verification campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Campaign configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Ceiling file (JSON, inequality id to ceiling); defaults to `<out>/ceilings.json`.
    #[arg(long = "ceiling-file", global = true)]
    ceiling_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve every experiment and write its trajectory snapshot.
    Solve,
    /// Solve every experiment with the SQG drift.
    Sqg,
    /// Run only the potential-estimate verifications.
    Potential,
    /// Estimate heat kernels, write them, and run the kernel verifications.
    Heatkernel,
    /// Run every selected verification.
    Verify,
    /// Print the contents of a snapshot file.
    Snapshot { path: PathBuf },
}

fn load(cli: &Cli) -> anyhow::Result<(CampaignConfig, Vec<u8>)> {
    let path = cli.config.as_ref().context("--config is required for this command")?;
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let config = CampaignConfig::load(path)?;
    Ok((config, bytes))
}

fn campaign(cli: &Cli, keep: &[Check]) -> anyhow::Result<ExitCode> {
    let (mut config, bytes) = load(cli)?;
    for e in &mut config.experiments {
        e.verify = restrict(&e.verify, keep);
    }
    let opts = CampaignOptions {
        seed: cli.seed,
        out_dir: cli.out.clone(),
        ceiling_file: cli.ceiling_file.clone(),
        input: Some(bytes),
    };
    let outcome = run_campaign(&config, &opts)?;
    for e in &outcome.report.experiments {
        for r in &e.reports {
            let status = if r.passed() { "pass" } else { "FAIL" };
            println!("{status}  {}/{}  rows={}  max_fitted={:.4e}", e.name, r.id, r.rows.len(), r.max_fitted());
            for f in &r.failures {
                println!("      {f}");
            }
        }
    }
    println!("report: {}", outcome.csv_path.display());
    if outcome.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        println!("failing: {}", outcome.failing_ids().join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn solve_all(cli: &Cli, force_sqg: bool) -> anyhow::Result<ExitCode> {
    let (mut config, _) = load(cli)?;
    let seed = cli.seed.unwrap_or(config.seed);
    std::fs::create_dir_all(&cli.out)?;
    for cfg in &mut config.experiments {
        if force_sqg {
            cfg.drift = DriftSpec::Sqg;
        }
        let exp = Experiment::build(cfg, seed)?;
        let traj = exp.solve()?;
        let path = cli.out.join(format!("{}.traj", cfg.name));
        save_trajectory(&path, &traj, exp.s())?;
        let last = traj.last();
        println!(
            "{}: {} snapshots to t = {}, max|u| = {:.6e}, mean = {:.6e} -> {}",
            cfg.name,
            traj.len(),
            traj.end(),
            last.max_abs(),
            last.mean(),
            path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn heat_kernels(cli: &Cli) -> anyhow::Result<ExitCode> {
    let (config, _) = load(cli)?;
    let seed = cli.seed.unwrap_or(config.seed);
    std::fs::create_dir_all(&cli.out)?;
    for cfg in &config.experiments {
        let Some(hk) = &cfg.verify.heat_kernel else { continue };
        let exp = Experiment::build(cfg, seed)?;
        let mut c = HeatKernelConfig::new(exp.solver.dt);
        if let Some(w) = hk.width {
            c = c.with_width(w);
        }
        if !hk.richardson {
            c = c.without_richardson();
        }
        let est = estimate_kernel(&exp.drift, &exp.kernel, &exp.grid, hk.eta, &hk.y, &hk.times, &c)?;
        let path = cli.out.join(format!("{}.hk", cfg.name));
        save_kernel(&path, &est)?;
        println!("{}: kernel at {} times -> {}", cfg.name, est.times.len(), path.display());
    }
    campaign(cli, &[Check::HeatKernel])
}

fn describe(path: &Path) -> anyhow::Result<()> {
    if let Ok(k) = load_kernel(path) {
        println!("heat kernel: s = {}, eta = {}, y = {:?}, widths = {:?}", k.s, k.eta, k.y, k.mollification_widths);
        for f in &k.fields {
            println!("  t = {}: mass = {:.8}, max = {:.6e}", f.time(), f.integral(), f.max());
        }
        return Ok(());
    }
    if let Ok((traj, s)) = load_trajectory(path) {
        let g = traj.grid();
        println!("trajectory: d = {}, n = {}, L = {}, s = {s}, {} snapshots", g.dim(), g.n(), g.length(), traj.len());
        for f in traj.snapshots() {
            println!("  t = {}: max|u| = {:.6e}, mean = {:.6e}", f.time(), f.max_abs(), f.mean());
        }
        return Ok(());
    }
    match load_field(path) {
        Ok(snap) => {
            let g = snap.field.grid();
            println!(
                "field: d = {}, n = {}, L = {}, s = {}, t = {}, max|u| = {:.6e}",
                g.dim(),
                g.n(),
                g.length(),
                snap.s,
                snap.field.time(),
                snap.field.max_abs()
            );
            Ok(())
        }
        Err(e) => bail!("{}: {e}", path.display()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve => solve_all(&cli, false),
        Command::Sqg => solve_all(&cli, true),
        Command::Potential => campaign(&cli, &[Check::Potential, Check::BmoSlanted]),
        Command::Heatkernel => heat_kernels(&cli),
        Command::Verify => campaign(&cli, &Check::ALL),
        Command::Snapshot { path } => describe(path).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
