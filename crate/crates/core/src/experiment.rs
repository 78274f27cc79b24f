//! Config-driven experiment pipelines. Each kind fans replications out in
//! parallel under derived seeds, aggregates deterministically (in
//! replication order), writes summary/trajectory/sample CSVs, and grades
//! its metrics against tolerances fixed up front.

use crate::fluid::{self, FluidError};
use crate::occupancy::{DiffusionState, FluidState};
use crate::policy::PolicySpec;
use crate::report::{
    fluid_solution_rows, sanitize_label, trajectory_rows, write_fluid_rows, write_samples,
    write_summary, FluidRow, SummaryRow,
};
use crate::rng::derive_seed2;
use crate::rules::Rule;
use crate::sim::{
    delta_tail_check, run_coupled, BatchCfg, DecisionMode, InitialState, SimConfig, SimError,
};
use crate::stats::{ks_two_sample, median, stationary_estimate};
use rayon::prelude::*;
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ------------------------------------------------------------------------
// Errors
// ------------------------------------------------------------------------

#[derive(Debug)]
pub enum ExperimentError {
    /// Bad config or inputs: exit code 2.
    Config(String),
    /// A per-event or per-path audit failed: exit code 3, engine bug.
    Invariant(String),
    /// Filesystem/CSV trouble: exit code 2.
    Io(String),
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Config(m) => write!(f, "config error: {m}"),
            ExperimentError::Invariant(m) => write!(f, "invariant violation: {m}"),
            ExperimentError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for ExperimentError {}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Io(_) => 2,
            ExperimentError::Invariant(_) => 3,
        }
    }
}

impl From<SimError> for ExperimentError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => ExperimentError::Config(m),
            SimError::Audit(v) => ExperimentError::Invariant(v.to_string()),
        }
    }
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

impl From<FluidError> for ExperimentError {
    fn from(e: FluidError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

// ------------------------------------------------------------------------
// Config
// ------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    FluidUniversality,
    FixedPoint,
    OrderingAudit,
    DeltaBound,
    DiffusionUniversality,
    Necessity,
    BatchFluid,
    Stationary,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::FluidUniversality => "fluid-universality",
            ExperimentKind::FixedPoint => "fixed-point",
            ExperimentKind::OrderingAudit => "ordering-audit",
            ExperimentKind::DeltaBound => "delta-bound",
            ExperimentKind::DiffusionUniversality => "diffusion-universality",
            ExperimentKind::Necessity => "necessity",
            ExperimentKind::BatchFluid => "batch-fluid",
            ExperimentKind::Stationary => "stationary",
        }
    }

    fn parse(s: &str) -> Result<Self, ExperimentError> {
        Ok(match s {
            "fluid-universality" => ExperimentKind::FluidUniversality,
            "fixed-point" => ExperimentKind::FixedPoint,
            "ordering-audit" => ExperimentKind::OrderingAudit,
            "delta-bound" => ExperimentKind::DeltaBound,
            "diffusion-universality" => ExperimentKind::DiffusionUniversality,
            "necessity" => ExperimentKind::Necessity,
            "batch-fluid" => ExperimentKind::BatchFluid,
            "stationary" => ExperimentKind::Stationary,
            other => {
                return Err(ExperimentError::Config(format!(
                    "field 'experiment': unknown kind '{other}'"
                )))
            }
        })
    }
}

/// Acceptance thresholds. Every default is a pre-stated tolerance; configs
/// may override individual entries under "tolerances".
#[derive(Clone, Copy, Debug)]
pub struct Tolerances {
    /// Fluid trajectory sup-l1 distance to the ODE.
    pub sup_l1: f64,
    /// Terminal-marginal KS distance between two simulated policies.
    pub ks: f64,
    /// Terminal-marginal KS distance between simulation and the SDE solver.
    pub ks_sde: f64,
    /// Absolute error of the stationary level-1 estimate.
    pub level1: f64,
    /// Ceiling on level-2 mass where the limit predicts zero.
    pub level2: f64,
    /// z-score bound for the decision-difference law check.
    pub z_max: f64,
    /// Required growth factor of median sup-level-2 across the size grid.
    pub growth_factor: f64,
    /// Allowed relative spread of the baseline medians across the grid.
    pub baseline_drift: f64,
    /// Resource guard: refuse runs whose estimated cost exceeds this.
    pub event_budget: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            sup_l1: 0.05,
            ks: 0.10,
            ks_sde: 0.15,
            level1: 0.02,
            level2: 0.02,
            z_max: 3.0,
            growth_factor: 1.5,
            baseline_drift: 0.20,
            event_budget: 5e9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub n_grid: Vec<u32>,
    pub lambda_rule: Rule,
    pub d_rules: Vec<Rule>,
    pub n_rule: Option<Rule>,
    pub c_rule: Option<Rule>,
    pub ell_rule: Option<Rule>,
    pub b: usize,
    pub t_max: f64,
    /// ODE / SDE integration step.
    pub dt: f64,
    pub snapshot_dt: f64,
    pub replications: u64,
    pub seed: u64,
    pub burn_in: f64,
    pub output_dir: Option<PathBuf>,
    pub tolerances: Tolerances,
}

fn cfg_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

struct KeyMap(BTreeMap<String, Value>);

impl KeyMap {
    fn pop(&mut self, key: &str) -> Option<Value> {
        self.0.remove(key)
    }

    fn pop_f64(&mut self, key: &str, default: f64) -> Result<f64, ExperimentError> {
        match self.pop(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| cfg_err(format!("field '{key}': expected a number, got {v}"))),
        }
    }

    fn pop_u64(&mut self, key: &str, default: u64) -> Result<u64, ExperimentError> {
        match self.pop(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| cfg_err(format!("field '{key}': expected a nonnegative integer, got {v}"))),
        }
    }

    fn pop_rule(&mut self, key: &str) -> Result<Option<Rule>, ExperimentError> {
        match self.pop(key) {
            None => Ok(None),
            Some(Value::String(s)) => s
                .parse::<Rule>()
                .map(Some)
                .map_err(|e| cfg_err(format!("field '{key}': {e}"))),
            Some(v) => Err(cfg_err(format!("field '{key}': expected a rule string, got {v}"))),
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| cfg_err(format!("config is not valid JSON: {e}")))?;
    let obj = root
        .as_object()
        .ok_or_else(|| cfg_err("config top level must be a JSON object"))?;
    let mut map = KeyMap(obj.clone().into_iter().collect());

    let kind = match map.pop("experiment") {
        Some(Value::String(s)) => ExperimentKind::parse(&s)?,
        Some(v) => return Err(cfg_err(format!("field 'experiment': expected a string, got {v}"))),
        None => return Err(cfg_err("missing required field 'experiment'")),
    };

    let n_grid: Vec<u32> = match map.pop("N_grid") {
        Some(Value::Array(items)) => {
            let mut grid = Vec::with_capacity(items.len());
            for item in items {
                let n = item
                    .as_u64()
                    .filter(|&n| n >= 1 && n <= u64::from(u32::MAX))
                    .ok_or_else(|| cfg_err(format!("field 'N_grid': entries must be positive integers, got {item}")))?;
                grid.push(n as u32);
            }
            grid
        }
        Some(v) => return Err(cfg_err(format!("field 'N_grid': expected an array, got {v}"))),
        None => return Err(cfg_err("missing required field 'N_grid'")),
    };
    if n_grid.is_empty() {
        return Err(cfg_err("field 'N_grid': must not be empty"));
    }
    if !n_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(cfg_err("field 'N_grid': must be strictly increasing"));
    }

    let d_rules: Vec<Rule> = match map.pop("d_rule") {
        None => Vec::new(),
        Some(Value::String(s)) => {
            vec![s.parse().map_err(|e| cfg_err(format!("field 'd_rule': {e}")))?]
        }
        Some(Value::Array(items)) => {
            let mut rules = Vec::with_capacity(items.len());
            for item in items {
                let s = item
                    .as_str()
                    .ok_or_else(|| cfg_err(format!("field 'd_rule': expected rule strings, got {item}")))?;
                rules.push(s.parse().map_err(|e| cfg_err(format!("field 'd_rule': {e}")))?);
            }
            rules
        }
        Some(v) => {
            return Err(cfg_err(format!(
                "field 'd_rule': expected a rule string or list of rule strings, got {v}"
            )))
        }
    };

    let lambda_rule = map.pop_rule("lambda_rule")?.unwrap_or(Rule::Load(0.9));
    let n_rule = map.pop_rule("n_rule")?;
    let c_rule = map.pop_rule("c_rule")?;
    let ell_rule = map.pop_rule("ell_rule")?;
    let b = map.pop_u64("b", 10)? as usize;
    let t_max = map.pop_f64("T", 10.0)?;
    let dt = map.pop_f64("dt", 1e-3)?;
    let snapshot_dt = map.pop_f64("snapshot_dt", 0.1)?;
    let replications = map.pop_u64("replications", 1)?;
    let seed = map.pop_u64("seed", 0)?;
    let burn_in = map.pop_f64("burn_in", 0.0)?;
    let output_dir = match map.pop("output_dir") {
        None => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(v) => return Err(cfg_err(format!("field 'output_dir': expected a path string, got {v}"))),
    };

    let mut tol = Tolerances::default();
    if let Some(tv) = map.pop("tolerances") {
        let tobj = tv
            .as_object()
            .ok_or_else(|| cfg_err("field 'tolerances': expected an object"))?;
        for (k, v) in tobj {
            let x = v
                .as_f64()
                .ok_or_else(|| cfg_err(format!("tolerance '{k}': expected a number, got {v}")))?;
            match k.as_str() {
                "sup_l1" => tol.sup_l1 = x,
                "ks" => tol.ks = x,
                "ks_sde" => tol.ks_sde = x,
                "level1" => tol.level1 = x,
                "level2" => tol.level2 = x,
                "z_max" => tol.z_max = x,
                "growth_factor" => tol.growth_factor = x,
                "baseline_drift" => tol.baseline_drift = x,
                "event_budget" => tol.event_budget = x,
                other => return Err(cfg_err(format!("unknown tolerance key '{other}'"))),
            }
        }
    }

    if !map.0.is_empty() {
        let keys: Vec<&str> = map.0.keys().map(|s| s.as_str()).collect();
        return Err(cfg_err(format!("unknown config keys: {}", keys.join(", "))));
    }

    let cfg = ExperimentConfig {
        kind,
        n_grid,
        lambda_rule,
        d_rules,
        n_rule,
        c_rule,
        ell_rule,
        b,
        t_max,
        dt,
        snapshot_dt,
        replications,
        seed,
        burn_in,
        output_dir,
        tolerances: tol,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(self.t_max > 0.0) {
            return Err(cfg_err("field 'T': must be positive"));
        }
        if !(self.dt > 0.0) || !(self.snapshot_dt > 0.0) {
            return Err(cfg_err("fields 'dt' and 'snapshot_dt' must be positive"));
        }
        if self.b < 1 {
            return Err(cfg_err("field 'b': must be at least 1"));
        }
        if self.replications < 1 {
            return Err(cfg_err("field 'replications': must be at least 1"));
        }
        let need_single_d = |what: &str| -> Result<(), ExperimentError> {
            if self.d_rules.len() != 1 {
                return Err(cfg_err(format!("{what} needs exactly one d_rule")));
            }
            Ok(())
        };
        match self.kind {
            ExperimentKind::OrderingAudit => {
                if self.n_rule.is_none() {
                    return Err(cfg_err("ordering-audit needs n_rule"));
                }
            }
            ExperimentKind::DeltaBound => {
                need_single_d("delta-bound")?;
                if self.n_rule.is_some() && self.replications < 2 {
                    return Err(cfg_err(
                        "delta-bound with n_rule needs replications >= 2 for the z-test",
                    ));
                }
            }
            ExperimentKind::FluidUniversality => {
                if self.d_rules.is_empty() {
                    return Err(cfg_err("fluid-universality needs at least one d_rule"));
                }
                self.check_grid_alignment()?;
            }
            ExperimentKind::FixedPoint | ExperimentKind::Stationary => {
                need_single_d(self.kind.as_str())?;
                if !(self.burn_in < self.t_max) {
                    return Err(cfg_err("burn_in must be below T"));
                }
            }
            ExperimentKind::BatchFluid => {
                need_single_d("batch-fluid")?;
                if self.ell_rule.is_none() {
                    return Err(cfg_err("batch-fluid needs ell_rule"));
                }
                if self.b < 2 {
                    return Err(cfg_err("batch-fluid needs b >= 2 to watch the second level"));
                }
            }
            ExperimentKind::DiffusionUniversality | ExperimentKind::Necessity => {
                need_single_d(self.kind.as_str())?;
                if self.b != 2 {
                    return Err(cfg_err(format!("{} runs on b = 2", self.kind.as_str())));
                }
                if self.kind == ExperimentKind::Necessity && self.n_grid.len() < 2 {
                    return Err(cfg_err("necessity needs at least two grid sizes to compare"));
                }
            }
        }
        // Every rule must evaluate at every grid size.
        for &n in &self.n_grid {
            let lam = self.lambda_rule.eval(n);
            if !(lam >= 0.0) || !lam.is_finite() {
                return Err(cfg_err(format!(
                    "lambda_rule {} yields invalid rate {lam} at N={n}",
                    self.lambda_rule
                )));
            }
            for r in &self.d_rules {
                let d = r.eval_int(n).map_err(cfg_err)?;
                if d < 1 {
                    return Err(cfg_err(format!("d_rule {r} yields d=0 at N={n}")));
                }
            }
            if let Some(r) = &self.n_rule {
                r.eval_int(n).map_err(cfg_err)?;
            }
            if let Some(r) = &self.ell_rule {
                let ell = r.eval_int(n).map_err(cfg_err)?;
                if ell < 1 {
                    return Err(cfg_err(format!("ell_rule {r} yields ell=0 at N={n}")));
                }
            }
            if let Some(r) = &self.c_rule {
                let c = r.eval(n);
                if !(c >= 0.0 && c <= f64::from(n)) {
                    return Err(cfg_err(format!("c_rule {r} yields c={c} outside [0, N] at N={n}")));
                }
            }
        }
        Ok(())
    }

    /// Kinds that compare against an integrated ODE need the reporting grid
    /// to land on the integration grid.
    fn check_grid_alignment(&self) -> Result<(), ExperimentError> {
        let steps = self.t_max / self.dt;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(cfg_err("T must be a whole number of dt steps"));
        }
        let stride = self.snapshot_dt / self.dt;
        if (stride - stride.round()).abs() > 1e-6 {
            return Err(cfg_err("snapshot_dt must be a whole multiple of dt"));
        }
        Ok(())
    }

    fn single_d(&self, n: u32) -> Result<usize, ExperimentError> {
        Ok(self.d_rules[0].eval_int(n).map_err(cfg_err)? as usize)
    }

    /// Normalized per-server arrival rate.
    fn lambda_norm(&self, n: u32) -> f64 {
        self.lambda_rule.eval(n) / f64::from(n)
    }

    /// Cost estimate in event-units: uniformized events weighted by the
    /// per-arrival rank-sampling width, summed over grid, policies, and
    /// replications (plus SDE steps where applicable).
    pub fn estimated_event_units(&self) -> Result<f64, ExperimentError> {
        let mut units = 0.0;
        let reps = self.replications as f64;
        for &n in &self.n_grid {
            let lam = self.lambda_rule.eval(n);
            let (n_policies, d_weight, ell) = match self.kind {
                ExperimentKind::OrderingAudit => (3.0, 0.0, 1.0),
                ExperimentKind::DeltaBound => (2.0, self.single_d(n)? as f64, 1.0),
                ExperimentKind::FluidUniversality => {
                    let mut dmax = 0u64;
                    for r in &self.d_rules {
                        dmax = dmax.max(r.eval_int(n).map_err(cfg_err)?);
                    }
                    ((1 + self.d_rules.len()) as f64, dmax as f64, 1.0)
                }
                ExperimentKind::FixedPoint | ExperimentKind::Stationary => {
                    (1.0, self.single_d(n)? as f64, 1.0)
                }
                ExperimentKind::BatchFluid => {
                    let ell = self.ell_rule.as_ref().unwrap().eval_int(n).map_err(cfg_err)?;
                    (1.0, self.single_d(n)? as f64, ell as f64)
                }
                // Single-uniform decision modes: no rank sampling cost.
                ExperimentKind::DiffusionUniversality | ExperimentKind::Necessity => (2.0, 0.0, 1.0),
            };
            let event_rate = lam / ell + f64::from(n);
            let weight = 1.0 + d_weight / 8.0;
            units += event_rate * self.t_max * weight * n_policies * reps;
        }
        if self.kind == ExperimentKind::DiffusionUniversality {
            units += reps * (self.t_max / self.dt);
        }
        Ok(units)
    }
}

// ------------------------------------------------------------------------
// Report
// ------------------------------------------------------------------------

#[derive(Debug)]
pub struct ComparisonReport {
    pub kind: ExperimentKind,
    pub rows: Vec<SummaryRow>,
    pub all_pass: bool,
    pub runtime: std::time::Duration,
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ComparisonReport, ExperimentError> {
    cfg.validate()?;
    let units = cfg.estimated_event_units()?;
    if units > cfg.tolerances.event_budget {
        return Err(cfg_err(format!(
            "estimated cost {units:.3e} event-units exceeds the budget {:.3e}; \
             shrink N_grid, T, or replications, or raise tolerances.event_budget",
            cfg.tolerances.event_budget
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let started = Instant::now();
    let rows = match cfg.kind {
        ExperimentKind::OrderingAudit => run_ordering_audit(cfg, out_dir)?,
        ExperimentKind::DeltaBound => run_delta_bound(cfg, out_dir)?,
        ExperimentKind::FluidUniversality => run_fluid_universality(cfg, out_dir)?,
        ExperimentKind::FixedPoint | ExperimentKind::Stationary => run_fixed_point(cfg, out_dir)?,
        ExperimentKind::BatchFluid => run_batch_fluid(cfg, out_dir)?,
        ExperimentKind::DiffusionUniversality => run_diffusion_universality(cfg, out_dir)?,
        ExperimentKind::Necessity => run_necessity(cfg, out_dir)?,
    };
    write_summary(&out_dir.join("summary.csv"), &rows)?;
    let all_pass = rows.iter().all(|r| r.pass);
    Ok(ComparisonReport { kind: cfg.kind, rows, all_pass, runtime: started.elapsed() })
}

fn row(cfg: &ExperimentConfig, n: u32, policy: &str, metric: &str, value: f64, pass: bool) -> SummaryRow {
    SummaryRow {
        experiment: cfg.kind.as_str().to_string(),
        n,
        policy: policy.to_string(),
        metric: metric.to_string(),
        value,
        pass,
    }
}

fn base_sim(cfg: &ExperimentConfig, n: u32, seed: u64, policies: Vec<PolicySpec>) -> SimConfig {
    SimConfig {
        n,
        lambda: cfg.lambda_rule.eval(n),
        b: cfg.b,
        t_max: cfg.t_max,
        seed,
        policies,
        snapshot_dt: cfg.snapshot_dt,
        batch: None,
        audit: false,
        init: InitialState::Empty,
        decision_mode: DecisionMode::RankDraws,
    }
}

fn par_reps<T, F>(reps: u64, f: F) -> Result<Vec<T>, ExperimentError>
where
    T: Send,
    F: Fn(u64) -> Result<T, ExperimentError> + Sync + Send,
{
    (0..reps).into_par_iter().map(f).collect()
}

// ------------------------------------------------------------------------
// Pipelines
// ------------------------------------------------------------------------

/// Coupled (shortest-queue, windowed-uniform, sloppiest) run with per-event
/// ordering and sandwich audits on. Completing at all is the result; any
/// violation aborts with an invariant error.
fn run_ordering_audit(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let n_rule = cfg.n_rule.as_ref().unwrap();
    let mut rows = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let window = n_rule.eval_int(n).map_err(cfg_err)? as u32;
        let policies = vec![
            PolicySpec::Jsq,
            PolicySpec::CjsqUniform { n: window },
            PolicySpec::Mjsq { n: window },
        ];
        let results = par_reps(cfg.replications, |rep| {
            let mut sim = base_sim(cfg, n, derive_seed2(cfg.seed, ni as u64, rep), policies.clone());
            sim.audit = true;
            let res = run_coupled(&sim)?;
            let traj = if rep == 0 {
                let items: Vec<(u64, &crate::sim::Trajectory)> =
                    res.trajectories.iter().map(|t| (rep, t)).collect();
                let mut all = Vec::new();
                for (r, t) in items {
                    all.extend(trajectory_rows(r, t));
                }
                Some(all)
            } else {
                None
            };
            Ok((res.events, traj))
        })?;
        let total_events: u64 = results.iter().map(|(e, _)| e).sum();
        if let Some(traj_rows) = results.into_iter().find_map(|(_, t)| t) {
            write_fluid_rows(&out.join(format!("trajectories_n{n}.csv")), cfg.b, &traj_rows)?;
        }
        rows.push(row(cfg, n, "coupled", "audit_violations", 0.0, true));
        rows.push(row(cfg, n, "coupled", "events", total_events as f64, true));
    }
    Ok(rows)
}

/// Coupled power-of-d pair with the per-event l1-vs-differences audit on.
/// With n_rule: pair (power-of-d, windowed hybrid) and z-test the window
/// misses against their exact Binomial mean. Without: pair against the
/// shortest-queue rule, audit only.
fn run_delta_bound(cfg: &ExperimentConfig, _out: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let mut rows = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let d = cfg.single_d(n)?;
        let window = match &cfg.n_rule {
            Some(r) => Some(r.eval_int(n).map_err(cfg_err)? as u32),
            None => None,
        };
        let policies = match window {
            Some(w) => vec![
                PolicySpec::JsqD { d, with_replacement: true },
                PolicySpec::JsqNd { n: w, d },
            ],
            None => vec![PolicySpec::JsqD { d, with_replacement: true }, PolicySpec::Jsq],
        };
        let pair_label = format!("{} vs {}", policies[0].label(), policies[1].label());
        let results = par_reps(cfg.replications, |rep| {
            let mut sim = base_sim(cfg, n, derive_seed2(cfg.seed, ni as u64, rep), policies.clone());
            sim.audit = true;
            let res = run_coupled(&sim)?;
            let p = res.pair(0, 1);
            Ok((res.arrivals, p.delta_total, p.window_miss))
        })?;
        rows.push(row(cfg, n, &pair_label, "l1_delta_violations", 0.0, true));
        let mean_delta =
            results.iter().map(|&(_, dt, _)| dt as f64).sum::<f64>() / results.len() as f64;
        rows.push(row(cfg, n, &pair_label, "delta_total_mean", mean_delta, true));
        if let Some(w) = window {
            let samples: Vec<(u64, u64)> = results.iter().map(|&(a, _, m)| (a, m)).collect();
            let (observed, predicted, z) = delta_tail_check(&samples, n, w, d);
            rows.push(row(cfg, n, &pair_label, "window_miss_mean", observed, true));
            rows.push(row(cfg, n, &pair_label, "window_miss_predicted", predicted, true));
            rows.push(row(
                cfg,
                n,
                &pair_label,
                "window_miss_z",
                z,
                z.abs() <= cfg.tolerances.z_max,
            ));
        }
    }
    Ok(rows)
}

/// One coupled run per size: the shortest-queue rule plus a power-of-d
/// policy per configured d rule, all against the integrated fluid ODE.
/// The sup-l1 gate applies at the largest size; the distances must also
/// shrink strictly along the grid.
fn run_fluid_universality(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<SummaryRow>, ExperimentError> {
    let n_max = *cfg.n_grid.last().unwrap();
    let mut rows = Vec::new();
    let mut per_policy_dist: Vec<Vec<f64>> = vec![Vec::new(); 1 + cfg.d_rules.len()];
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let lam_norm = cfg.lambda_norm(n);
        let sol = fluid::integrate_fluid(
            &FluidState::new(vec![0.0; cfg.b]),
            lam_norm,
            cfg.t_max,
            cfg.dt,
        );
        let mut policies = vec![PolicySpec::Jsq];
        for r in &cfg.d_rules {
            policies.push(PolicySpec::JsqD {
                d: r.eval_int(n).map_err(cfg_err)? as usize,
                with_replacement: true,
            });
        }
        let results = par_reps(cfg.replications, |rep| {
            let sim = base_sim(cfg, n, derive_seed2(cfg.seed, ni as u64, rep), policies.clone());
            let res = run_coupled(&sim)?;
            let sups: Vec<f64> = res
                .trajectories
                .iter()
                .map(|traj| {
                    traj.snapshots
                        .iter()
                        .map(|s| s.state.fluid_scale().l1_distance(sol.at(s.t)))
                        .fold(0.0, f64::max)
                })
                .collect();
            let traj_rows = if rep == 0 {
                let mut all = Vec::new();
                for t in &res.trajectories {
                    all.extend(trajectory_rows(rep, t));
                }
                Some(all)
            } else {
                None
            };
            Ok((sups, traj_rows))
        })?;
        if let Some(mut traj_rows) = results.iter().find_map(|(_, t)| t.clone()) {
            traj_rows.extend(fluid_solution_rows("fluid-ode", &sol, cfg.snapshot_dt));
            write_fluid_rows(&out.join(format!("trajectories_n{n}.csv")), cfg.b, &traj_rows)?;
        }
        for (pi, policy) in policies.iter().enumerate() {
            let worst = results.iter().map(|(s, _)| s[pi]).fold(0.0, f64::max);
            per_policy_dist[pi].push(worst);
            let gated = n == n_max;
            rows.push(row(
                cfg,
                n,
                &policy.label(),
                "sup_l1_vs_ode",
                worst,
                !gated || worst <= cfg.tolerances.sup_l1,
            ));
        }
    }
    // Labels vary with N; report the monotonicity per rule position.
    let mut labels = vec!["JSQ".to_string()];
    labels.extend(cfg.d_rules.iter().map(|r| format!("JSQ_D({r})")));
    for (pi, dists) in per_policy_dist.iter().enumerate() {
        let monotone = dists.windows(2).all(|w| w[1] < w[0]);
        rows.push(row(
            cfg,
            n_max,
            &labels[pi],
            "sup_l1_strictly_decreasing",
            if monotone { 1.0 } else { 0.0 },
            monotone || cfg.n_grid.len() < 2,
        ));
    }
    Ok(rows)
}

/// Long-run time average of one power-of-d policy against the fluid fixed
/// point. fixed-point gates the two level clauses; stationary additionally
/// reports the full l1 distance as the gate.
fn run_fixed_point(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let mut rows = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let d = cfg.single_d(n)?;
        let lam_norm = cfg.lambda_norm(n);
        let q_star = fluid::fixed_point(lam_norm, cfg.b)?;
        let policies = vec![PolicySpec::JsqD { d, with_replacement: true }];
        let label = policies[0].label();
        let results = par_reps(cfg.replications, |rep| {
            let sim = base_sim(cfg, n, derive_seed2(cfg.seed, ni as u64, rep), policies.clone());
            let res = run_coupled(&sim)?;
            let est = stationary_estimate(&res.trajectories[0], cfg.burn_in);
            let traj_rows = if rep == 0 { Some(trajectory_rows(rep, &res.trajectories[0])) } else { None };
            Ok((est, traj_rows))
        })?;
        if let Some(traj_rows) = results.iter().find_map(|(_, t)| t.clone()) {
            write_fluid_rows(&out.join(format!("trajectories_n{n}.csv")), cfg.b, &traj_rows)?;
        }
        let mut avg = vec![0.0; cfg.b];
        for (est, _) in &results {
            for (a, v) in avg.iter_mut().zip(&est.q) {
                *a += v;
            }
        }
        for a in &mut avg {
            *a /= results.len() as f64;
        }
        let est = FluidState::new(avg);
        let err1 = (est.q[0] - lam_norm).abs();
        let lvl2 = if cfg.b >= 2 { est.q[1] } else { 0.0 };
        rows.push(row(cfg, n, &label, "stationary_level1_abs_err", err1, err1 <= cfg.tolerances.level1));
        rows.push(row(cfg, n, &label, "stationary_level2", lvl2, lvl2 <= cfg.tolerances.level2));
        let l1 = est.l1_distance(&q_star);
        let l1_pass = cfg.kind != ExperimentKind::Stationary || l1 <= cfg.tolerances.sup_l1;
        rows.push(row(cfg, n, &label, "l1_vs_fixed_point", l1, l1_pass));
    }
    Ok(rows)
}

/// Batch arrivals against the single-level closed form: sup error of the
/// first level and a ceiling on the second level, gated at the largest size.
///
/// Replications estimate the limiting path: level fractions are averaged
/// pointwise across runs before the comparison. A batch event moves ell
/// tasks at once, so a single path carries level-1 noise of roughly
/// sqrt(lambda*ell/2N) — at one replication the gate reads that raw path.
fn run_batch_fluid(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let n_max = *cfg.n_grid.last().unwrap();
    let mut rows = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let d = cfg.single_d(n)?;
        let ell = cfg.ell_rule.as_ref().unwrap().eval_int(n).map_err(cfg_err)? as u32;
        let lam_norm = cfg.lambda_norm(n);
        if lam_norm > 1.0 {
            return Err(cfg_err(format!(
                "batch-fluid needs a subcritical load, got lambda/N = {lam_norm} at N={n}"
            )));
        }
        let policies = vec![PolicySpec::BatchJsqD { ell, d }];
        let label = policies[0].label();
        let results = par_reps(cfg.replications, |rep| {
            let mut sim = base_sim(cfg, n, derive_seed2(cfg.seed, ni as u64, rep), policies.clone());
            sim.batch = Some(BatchCfg { ell });
            let res = run_coupled(&sim)?;
            let traj = &res.trajectories[0];
            let path: Vec<(f64, f64, f64)> = traj
                .snapshots
                .iter()
                .map(|s| {
                    let q = s.state.fluid_scale();
                    (s.t, q.q[0], if cfg.b >= 2 { q.q[1] } else { 0.0 })
                })
                .collect();
            let traj_rows = if rep == 0 { Some(trajectory_rows(rep, traj)) } else { None };
            Ok((path, traj_rows))
        })?;
        let reps = results.len() as f64;
        let n_snap = results[0].0.len();
        debug_assert!(results.iter().all(|r| r.0.len() == n_snap));
        let mut sup_q1 = 0.0f64;
        let mut max_q2 = 0.0f64;
        for i in 0..n_snap {
            let t = results[0].0[i].0;
            let q1 = results.iter().map(|r| r.0[i].1).sum::<f64>() / reps;
            let q2 = results.iter().map(|r| r.0[i].2).sum::<f64>() / reps;
            let reference = fluid::batch_closed_form(0.0, lam_norm, t, cfg.b);
            sup_q1 = sup_q1.max((q1 - reference.q[0]).abs());
            max_q2 = max_q2.max(q2);
        }
        if let Some(mut traj_rows) = results.iter().find_map(|(_, t)| t.clone()) {
            let points = (cfg.t_max / cfg.snapshot_dt + 1e-9).floor() as usize + 1;
            for i in 0..points {
                let t = i as f64 * cfg.snapshot_dt;
                traj_rows.push(FluidRow {
                    rep_id: 0,
                    policy: "batch-closed-form".to_string(),
                    t,
                    levels: fluid::batch_closed_form(0.0, lam_norm, t, cfg.b).q,
                    loss: 0.0,
                });
            }
            write_fluid_rows(&out.join(format!("trajectories_n{n}.csv")), cfg.b, &traj_rows)?;
        }
        let gated = n == n_max;
        rows.push(row(
            cfg,
            n,
            &label,
            "sup_level1_vs_closed_form",
            sup_q1,
            !gated || sup_q1 <= cfg.tolerances.sup_l1,
        ));
        rows.push(row(
            cfg,
            n,
            &label,
            "max_level2",
            max_q2,
            !gated || max_q2 <= cfg.tolerances.level2,
        ));
    }
    Ok(rows)
}

fn beta_of(cfg: &ExperimentConfig, n: u32) -> f64 {
    (f64::from(n) - cfg.lambda_rule.eval(n)) / f64::from(n).sqrt()
}

/// Critically loaded two-level systems: terminal diffusion-scaled level-2
/// samples under a wide power-of-d policy vs the shortest-queue rule (KS,
/// nonincreasing in N), plus the shortest-queue samples against the
/// reflected-SDE solver at the largest size.
fn run_diffusion_universality(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<SummaryRow>, ExperimentError> {
    let n_max = *cfg.n_grid.last().unwrap();
    let mut rows = Vec::new();
    let mut ks_per_n = Vec::new();
    let mut jsq_samples_at_max: Vec<f64> = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let d = cfg.single_d(n)?;
        let policies = vec![PolicySpec::JsqD { d, with_replacement: true }, PolicySpec::Jsq];
        let pair_label = format!("{} vs JSQ", policies[0].label());
        let sqrt_n = f64::from(n).sqrt();
        let results = par_reps(cfg.replications, |rep| {
            let mut sim = base_sim(cfg, n, derive_seed2(cfg.seed, ni as u64, rep), policies.clone());
            sim.init = InitialState::AllBusy;
            sim.decision_mode = DecisionMode::CdfUniform;
            let res = run_coupled(&sim)?;
            let q2 = |i: usize| f64::from(res.trajectories[i].terminal.level_count(2)) / sqrt_n;
            Ok((q2(0), q2(1)))
        })?;
        let d_samples: Vec<f64> = results.iter().map(|r| r.0).collect();
        let jsq_samples: Vec<f64> = results.iter().map(|r| r.1).collect();
        for (label, samples) in
            [(&policies[0].label(), &d_samples), (&"JSQ".to_string(), &jsq_samples)]
        {
            let entries: Vec<(u64, String, f64)> = samples
                .iter()
                .enumerate()
                .map(|(rep, &v)| (rep as u64, "qbar_2".to_string(), v))
                .collect();
            write_samples(
                &out.join(format!("samples_{}_n{n}.csv", sanitize_label(label))),
                &entries,
            )?;
        }
        let ks = ks_two_sample(&d_samples, &jsq_samples);
        ks_per_n.push(ks);
        let gated = n == n_max;
        rows.push(row(
            cfg,
            n,
            &pair_label,
            "ks_terminal_qbar2",
            ks,
            !gated || ks <= cfg.tolerances.ks,
        ));
        if n == n_max {
            jsq_samples_at_max = jsq_samples;
        }
    }
    if cfg.n_grid.len() >= 2 {
        let monotone = ks_per_n.windows(2).all(|w| w[1] <= w[0]);
        rows.push(row(
            cfg,
            n_max,
            "pair",
            "ks_nonincreasing",
            if monotone { 1.0 } else { 0.0 },
            monotone,
        ));
    }

    // SDE reference with the matched point initial law (all busy scales to
    // the origin) and the grid's critical slack at the largest size.
    let params = crate::diffusion::DiffusionParams {
        beta: beta_of(cfg, n_max),
        k: 2,
        t_max: cfg.t_max,
        h: cfg.dt,
        noise_scale: 1.0,
    };
    params.validate().map_err(cfg_err)?;
    let init = DiffusionState::point(vec![0.0, 0.0]);
    let sde_seed = derive_seed2(cfg.seed, cfg.n_grid.len() as u64, 0);
    let terminals = crate::diffusion::simulate_terminals(
        &params,
        &init,
        cfg.replications as usize,
        sde_seed,
    );
    let mut entries = Vec::new();
    for (rep, s) in terminals.iter().enumerate() {
        entries.push((rep as u64, "qbar_1".to_string(), s.qbar[0]));
        entries.push((rep as u64, "qbar_2".to_string(), s.qbar[1]));
        entries.push((rep as u64, "u1".to_string(), s.u1));
    }
    write_samples(&out.join("samples_sde.csv"), &entries)?;
    let sde_q2: Vec<f64> = terminals.iter().map(|s| s.qbar[1]).collect();
    let ks_sde = ks_two_sample(&jsq_samples_at_max, &sde_q2);
    rows.push(row(
        cfg,
        n_max,
        "JSQ vs SDE",
        "ks_terminal_qbar2_sde",
        ks_sde,
        ks_sde <= cfg.tolerances.ks_sde,
    ));
    Ok(rows)
}

/// Narrow power-of-d sampling in the critical regime: the median running
/// peak of the diffusion-scaled second level must grow along the size grid
/// (factor gate) while the shortest-queue baseline stays flat.
fn run_necessity(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let n_max = *cfg.n_grid.last().unwrap();
    let mut rows = Vec::new();
    let mut med_d = Vec::new();
    let mut med_jsq = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let d = cfg.single_d(n)?;
        let policies = vec![PolicySpec::JsqD { d, with_replacement: true }, PolicySpec::Jsq];
        let sqrt_n = f64::from(n).sqrt();
        let results = par_reps(cfg.replications, |rep| {
            let mut sim = base_sim(cfg, n, derive_seed2(cfg.seed, ni as u64, rep), policies.clone());
            sim.init = InitialState::AllBusy;
            sim.decision_mode = DecisionMode::CdfIntervalB2;
            let res = run_coupled(&sim)?;
            let sup = |i: usize| f64::from(res.trajectories[i].max_level[1]) / sqrt_n;
            Ok((sup(0), sup(1)))
        })?;
        let d_sups: Vec<f64> = results.iter().map(|r| r.0).collect();
        let jsq_sups: Vec<f64> = results.iter().map(|r| r.1).collect();
        for (label, samples) in
            [(&policies[0].label(), &d_sups), (&"JSQ".to_string(), &jsq_sups)]
        {
            let entries: Vec<(u64, String, f64)> = samples
                .iter()
                .enumerate()
                .map(|(rep, &v)| (rep as u64, "sup_qbar_2".to_string(), v))
                .collect();
            write_samples(
                &out.join(format!("samples_{}_n{n}.csv", sanitize_label(label))),
                &entries,
            )?;
        }
        med_d.push(median(&d_sups));
        med_jsq.push(median(&jsq_sups));
        rows.push(row(cfg, n, &policies[0].label(), "median_sup_qbar2", *med_d.last().unwrap(), true));
        rows.push(row(cfg, n, "JSQ", "median_sup_qbar2", *med_jsq.last().unwrap(), true));
    }
    let ratio = if med_d[0] > 0.0 { med_d.last().unwrap() / med_d[0] } else { f64::INFINITY };
    rows.push(row(
        cfg,
        n_max,
        "JSQ_D",
        "sup_qbar2_growth_ratio",
        ratio,
        ratio >= cfg.tolerances.growth_factor,
    ));
    let hi = med_jsq.iter().cloned().fold(f64::MIN, f64::max);
    let lo = med_jsq.iter().cloned().fold(f64::MAX, f64::min);
    let spread = if lo > 0.0 { hi / lo - 1.0 } else { f64::INFINITY };
    rows.push(row(
        cfg,
        n_max,
        "JSQ",
        "baseline_median_spread",
        spread,
        spread < cfg.tolerances.baseline_drift,
    ));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let cfg = parse_config_str(
            r#"{"experiment": "fixed-point", "N_grid": [200], "d_rule": "const:3", "T": 20, "burn_in": 10}"#,
        )
        .unwrap();
        assert_eq!(cfg.kind, ExperimentKind::FixedPoint);
        assert_eq!(cfg.n_grid, vec![200]);
        assert_eq!(cfg.lambda_rule, Rule::Load(0.9));
        assert_eq!(cfg.b, 10);
        assert_eq!(cfg.dt, 1e-3);
        assert_eq!(cfg.snapshot_dt, 0.1);
        assert_eq!(cfg.replications, 1);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.tolerances.sup_l1, 0.05);
        assert_eq!(cfg.tolerances.event_budget, 5e9);
    }

    #[test]
    fn unknown_kind_and_unknown_keys_are_named() {
        let err = parse_config_str(r#"{"experiment": "bogus", "N_grid": [10]}"#).unwrap_err();
        assert!(err.to_string().contains("experiment"), "{err}");
        assert!(err.to_string().contains("bogus"), "{err}");

        let err = parse_config_str(
            r#"{"experiment": "ordering-audit", "N_grid": [10], "n_rule": "const:2", "mystery": 1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");

        let err = parse_config_str(
            r#"{"experiment": "ordering-audit", "N_grid": [10], "n_rule": "const:2",
                "tolerances": {"nope": 1}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn rule_evaluation_matches_the_documented_example() {
        let cfg = parse_config_str(
            r#"{"experiment": "fixed-point", "N_grid": [100], "d_rule": "pow:0.7", "T": 5, "burn_in": 1}"#,
        )
        .unwrap();
        assert_eq!(cfg.single_d(100).unwrap(), 26);
    }

    #[test]
    fn d_rule_lists_parse_for_fluid_universality() {
        let cfg = parse_config_str(
            r#"{"experiment": "fluid-universality", "N_grid": [100, 200],
                "d_rule": ["pow:0.7", "pow:0.5"], "T": 2, "b": 4}"#,
        )
        .unwrap();
        assert_eq!(cfg.d_rules.len(), 2);
        let err = parse_config_str(
            r#"{"experiment": "fluid-universality", "N_grid": [100], "T": 2}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("d_rule"), "{err}");
    }

    #[test]
    fn per_kind_requirements_are_enforced() {
        assert!(parse_config_str(r#"{"experiment": "ordering-audit", "N_grid": [10]}"#)
            .unwrap_err()
            .to_string()
            .contains("n_rule"));
        assert!(parse_config_str(
            r#"{"experiment": "diffusion-universality", "N_grid": [100], "d_rule": "const:2", "b": 3}"#
        )
        .unwrap_err()
        .to_string()
        .contains("b = 2"));
        assert!(parse_config_str(
            r#"{"experiment": "necessity", "N_grid": [100], "d_rule": "const:2", "b": 2}"#
        )
        .unwrap_err()
        .to_string()
        .contains("two grid sizes"));
        assert!(parse_config_str(
            r#"{"experiment": "batch-fluid", "N_grid": [100], "d_rule": "const:4", "b": 4}"#
        )
        .unwrap_err()
        .to_string()
        .contains("ell_rule"));
    }

    #[test]
    fn resource_guard_refuses_oversized_runs() {
        let cfg = parse_config_str(
            r#"{"experiment": "fixed-point", "N_grid": [1000000], "d_rule": "const:2",
                "T": 100000, "burn_in": 1, "lambda_rule": "load:0.9"}"#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&cfg, dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("event_budget"), "{msg}");
        assert!(matches!(err, ExperimentError::Config(_)));
    }

    #[test]
    fn tiny_ordering_audit_runs_and_writes_summary() {
        let cfg = parse_config_str(
            r#"{"experiment": "ordering-audit", "N_grid": [20], "n_rule": "const:3",
                "b": 4, "T": 3, "replications": 2, "seed": 5, "lambda_rule": "load:0.8"}"#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, dir.path()).unwrap();
        assert!(report.all_pass);
        assert!(dir.path().join("summary.csv").exists());
        assert!(dir.path().join("trajectories_n20.csv").exists());
        let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(text.contains("audit_violations"));
    }

    #[test]
    fn summary_bytes_reproduce_under_identical_config() {
        let cfg = parse_config_str(
            r#"{"experiment": "delta-bound", "N_grid": [30], "d_rule": "const:4",
                "n_rule": "const:3", "b": 3, "T": 4, "replications": 4, "seed": 9}"#,
        )
        .unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_experiment(&cfg, d1.path()).unwrap();
        run_experiment(&cfg, d2.path()).unwrap();
        let b1 = std::fs::read(d1.path().join("summary.csv")).unwrap();
        let b2 = std::fs::read(d2.path().join("summary.csv")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn delta_bound_without_window_pairs_against_shortest_queue() {
        let cfg = parse_config_str(
            r#"{"experiment": "delta-bound", "N_grid": [25], "d_rule": "const:3",
                "b": 3, "T": 5, "replications": 2, "seed": 3}"#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, dir.path()).unwrap();
        assert!(report.all_pass);
        assert!(report.rows.iter().any(|r| r.policy.contains("vs JSQ")));
        assert!(!report.rows.iter().any(|r| r.metric == "window_miss_z"));
    }
}
