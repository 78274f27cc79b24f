//! Command-line front end over the simulator and its scaling-limit solvers.
//!
//! Exit codes: 0 success (all gates pass), 1 tolerance failure,
//! 2 configuration or I/O error, 3 invariant violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use podsim_core::diffusion::{
    complementarity_audit, simulate_path, simulate_terminals, DiffusionParams,
};
use podsim_core::experiment::{parse_config, run_experiment, ExperimentError};
use podsim_core::fluid::{fixed_point, integrate_fluid};
use podsim_core::occupancy::{DiffusionState, FluidState};
use podsim_core::report::{fluid_solution_rows, fmt_float, write_fluid_rows, write_samples, write_trajectories};
use podsim_core::rng::derive_seed;
use podsim_core::sim::{run_coupled, SimConfig, SimError};
use podsim_core::stats::{mean, sample_sd};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "podsim",
    version,
    about = "Power-of-d load balancing: coupled simulation, fluid ODE, reflected diffusion, experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run coupled sample paths of the configured policies
    Simulate(SimulateArgs),
    /// Integrate the deterministic fluid ODE and report its fixed point
    Fluid(FluidArgs),
    /// Sample the reflected diffusion for the critically loaded regime
    Diffusion(DiffusionArgs),
    /// Run a config-driven experiment and gate it against its tolerances
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config (JSON: N, lambda, b, T, seed, policies, ...)
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for trajectories.csv (summary goes to stdout either way)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-event invariant checks (coupling bound, ordering, state validity)
    #[arg(long)]
    audit: bool,
}

#[derive(Args)]
struct FluidArgs {
    /// Fluid config (JSON: lambda, b, T, optional dt/snapshot_dt/q0)
    #[arg(long)]
    config: PathBuf,
    /// Directory for fluid.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiffusionArgs {
    /// Diffusion config (JSON: beta, T, optional k/dt/noise_scale/init/...)
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config replication count
    #[arg(long)]
    replications: Option<u64>,
    /// Directory for terminals.csv and path.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Check boundary complementarity on the recorded path
    #[arg(long)]
    audit: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON, the experiment schema)
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides output_dir from the config; default "out")
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config replication count
    #[arg(long)]
    replications: Option<u64>,
    /// Worker threads for the replication fan-out (default: all cores)
    #[arg(long)]
    parallel: Option<usize>,
}

/// Whether stdout is still accepting writes; flips once on broken pipe so
/// work (and file output) continues when a consumer closes the pipe early.
static STDOUT_OK: AtomicBool = AtomicBool::new(true);

macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if STDOUT_OK.load(Ordering::Relaxed)
            && writeln!(std::io::stdout(), $($arg)*).is_err()
        {
            STDOUT_OK.store(false, Ordering::Relaxed);
        }
    }};
}

/// An error carrying the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }

    fn invariant(msg: impl Into<String>) -> Self {
        Failure { code: 3, msg: msg.into() }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::Config(_) => 2,
            SimError::Audit(_) => 3,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure { code: e.exit_code() as u8, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Fluid(a) => cmd_fluid(a),
        Cmd::Diffusion(a) => cmd_diffusion(a),
        Cmd::Experiment(a) => cmd_experiment(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

/// Compact human-readable value for stdout; CSVs carry full precision.
fn fmt_cell(v: f64) -> String {
    if v == 0.0 || (1e-3..1e6).contains(&v.abs()) {
        format!("{v:.6}")
    } else {
        format!("{v:.4e}")
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<u8, Failure> {
    let mut cfg: SimConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.audit |= a.audit;
    let res = run_coupled(&cfg)?;
    say!(
        "N={} lambda={} T={} seed={}: {} events ({} arrivals)",
        cfg.n, cfg.lambda, cfg.t_max, cfg.seed, res.events, res.arrivals
    );
    for traj in &res.trajectories {
        say!(
            "  {:<24} terminal levels {:?}, loss {}, null departures {}",
            traj.label,
            traj.terminal.levels(),
            traj.terminal.loss(),
            traj.null_departures,
        );
    }
    for p in &res.pairs {
        say!(
            "  pair ({}, {}): {} decision differences",
            res.trajectories[p.first].label, res.trajectories[p.second].label, p.delta_total
        );
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let items: Vec<(u64, &podsim_core::sim::Trajectory)> =
            res.trajectories.iter().map(|t| (0, t)).collect();
        let path = dir.join("trajectories.csv");
        write_trajectories(&path, &items)?;
        say!("wrote {}", path.display());
    }
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FluidCfg {
    /// Normalized per-server arrival rate.
    lambda: f64,
    b: usize,
    #[serde(rename = "T")]
    t_max: f64,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "default_snapshot_dt")]
    snapshot_dt: f64,
    /// Initial tail fractions q_1, q_2, ...; zero-padded to depth b.
    #[serde(default)]
    q0: Vec<f64>,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_snapshot_dt() -> f64 {
    0.1
}

fn cmd_fluid(a: &FluidArgs) -> Result<u8, Failure> {
    let cfg: FluidCfg = read_json(&a.config)?;
    if !(cfg.lambda.is_finite() && cfg.lambda >= 0.0) {
        return Err(Failure::config("lambda must be finite and nonnegative"));
    }
    if cfg.b < 1 || cfg.t_max <= 0.0 || cfg.dt <= 0.0 || cfg.snapshot_dt <= 0.0 {
        return Err(Failure::config("need b >= 1, T > 0, dt > 0, snapshot_dt > 0"));
    }
    if cfg.q0.len() > cfg.b {
        return Err(Failure::config(format!(
            "q0 has {} entries but b = {}",
            cfg.q0.len(),
            cfg.b
        )));
    }
    let mut q = cfg.q0.clone();
    q.resize(cfg.b, 0.0);
    let q0 = FluidState::new(q);
    if !q0.in_simplex(1e-12) {
        return Err(Failure::config(
            "q0 must be nonincreasing with entries in [0, 1]",
        ));
    }
    let sol = integrate_fluid(&q0, cfg.lambda, cfg.t_max, cfg.dt);
    let terminal = sol.at(cfg.t_max);
    say!("terminal state at T={}: {:?}", cfg.t_max, terminal.q);
    match fixed_point(cfg.lambda, cfg.b) {
        Ok(q_star) => {
            say!("fixed point: {:?}", q_star.q);
            say!("l1 distance terminal vs fixed point: {}", fmt_cell(terminal.l1_distance(&q_star)));
        }
        Err(e) => say!("fixed point: {e}"),
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let rows = fluid_solution_rows("fluid-ode", &sol, cfg.snapshot_dt);
        let path = dir.join("fluid.csv");
        write_fluid_rows(&path, cfg.b, &rows)?;
        say!("wrote {}", path.display());
    }
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiffusionCfg {
    /// Capacity slack coefficient (N - lambda(N)) / sqrt(N).
    beta: f64,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(rename = "T")]
    t_max: f64,
    #[serde(default = "default_h")]
    dt: f64,
    #[serde(default = "default_noise")]
    noise_scale: f64,
    #[serde(default = "default_reps")]
    replications: u64,
    #[serde(default)]
    seed: u64,
    /// Initial scaled tails (first entry <= 0, the rest >= 0); zero-padded.
    #[serde(default)]
    init: Vec<f64>,
}

fn default_k() -> usize {
    2
}

fn default_h() -> f64 {
    1e-3
}

fn default_noise() -> f64 {
    1.0
}

fn default_reps() -> u64 {
    1
}

fn cmd_diffusion(a: &DiffusionArgs) -> Result<u8, Failure> {
    let mut cfg: DiffusionCfg = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = a.replications {
        cfg.replications = reps;
    }
    let params = DiffusionParams {
        beta: cfg.beta,
        k: cfg.k,
        t_max: cfg.t_max,
        h: cfg.dt,
        noise_scale: cfg.noise_scale,
    };
    params.validate().map_err(Failure::config)?;
    if cfg.replications < 1 {
        return Err(Failure::config("replications must be at least 1"));
    }
    if cfg.init.len() > cfg.k {
        return Err(Failure::config(format!(
            "init has {} entries but k = {}",
            cfg.init.len(),
            cfg.k
        )));
    }
    let mut init = cfg.init.clone();
    init.resize(cfg.k, 0.0);
    if init[0] > 0.0 || init[1..].iter().any(|&x| x < 0.0) {
        return Err(Failure::config(
            "init must have a nonpositive first entry and nonnegative others",
        ));
    }
    let init = DiffusionState::point(init);

    let terminals = simulate_terminals(&params, &init, cfg.replications as usize, cfg.seed);
    say!(
        "beta={} k={} T={} dt={} replications={} seed={}",
        cfg.beta, cfg.k, cfg.t_max, cfg.dt, cfg.replications, cfg.seed
    );
    for i in 0..cfg.k {
        let vals: Vec<f64> = terminals.iter().map(|s| s.qbar[i]).collect();
        say!(
            "  terminal qbar_{}: mean {} sd {}",
            i + 1,
            fmt_cell(mean(&vals)),
            fmt_cell(if vals.len() > 1 { sample_sd(&vals) } else { 0.0 })
        );
    }
    let u1s: Vec<f64> = terminals.iter().map(|s| s.u1).collect();
    say!("  terminal u1: mean {}", fmt_cell(mean(&u1s)));

    // The recorded path reuses replication 0's seed, so path.csv ends at
    // the first row of terminals.csv.
    let need_path = a.audit || a.out.is_some();
    let recorded = if need_path {
        Some(simulate_path(&params, &init, derive_seed(cfg.seed, 0), true).1)
    } else {
        None
    };
    if a.audit {
        let path = recorded.as_ref().unwrap();
        complementarity_audit(path).map_err(Failure::invariant)?;
        say!("complementarity audit: ok over {} steps", path.len());
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (rep, s) in terminals.iter().enumerate() {
            for i in 0..cfg.k {
                entries.push((rep as u64, format!("qbar_{}", i + 1), s.qbar[i]));
            }
            entries.push((rep as u64, "u1".to_string(), s.u1));
        }
        let tpath = dir.join("terminals.csv");
        write_samples(&tpath, &entries)?;
        say!("wrote {}", tpath.display());

        let ppath = dir.join("path.csv");
        let mut w = csv::Writer::from_path(&ppath)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=cfg.k).map(|i| format!("qbar_{i}")));
        header.push("u1".to_string());
        w.write_record(&header)?;
        for rec in recorded.as_ref().unwrap() {
            let mut row = vec![fmt_float(rec.t)];
            row.extend(rec.state.qbar.iter().map(|&x| fmt_float(x)));
            row.push(fmt_float(rec.state.u1));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Failure::config(e.to_string()))?;
        say!("wrote {}", ppath.display());
    }
    Ok(0)
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<u8, Failure> {
    if let Some(threads) = a.parallel {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::config(format!("--parallel: {e}")))?;
    }
    let mut cfg = parse_config(&a.config).map_err(Failure::from)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = a.replications {
        cfg.replications = reps;
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let report = run_experiment(&cfg, &out)?;
    for row in &report.rows {
        say!(
            "{}  N={:<6} {:<28} {} = {}",
            if row.pass { "PASS" } else { "FAIL" },
            row.n,
            row.policy,
            row.metric,
            fmt_cell(row.value)
        );
    }
    say!(
        "{} rows in {:.2?}; summary at {}",
        report.rows.len(),
        report.runtime,
        out.join("summary.csv").display()
    );
    if report.all_pass {
        say!("result: all gates pass");
        Ok(0)
    } else {
        say!("result: tolerance failure");
        Ok(1)
    }
}
