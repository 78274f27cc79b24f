//! Uniformized continuous-time event engine. All compared systems evolve on
//! one shared randomness stream: common arrival epochs, common
//! potential-departure clocks indexed by server rank, and common decision
//! uniforms. Per-event invariant audits (tail-sum orderings, the l1-vs-
//! decision-difference bound) run optionally and abort on violation.

use crate::occupancy::{Level, OccupancyState};
use crate::policy::{
    decide_cjsq_uniform, decide_jsq_d_cdf, decide_jsq_d_interval_b2, decide_jsq_nd, decide_pi_c,
    ArrivalDecision, PiCDecision, PolicySpec,
};
use crate::rng::rng_from;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

// ------------------------------------------------------------------------
// Configuration
// ------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Empty,
    AllBusy,
}

/// How power-of-d policies consume the shared randomness. `RankDraws` is the
/// literal construction; the two inversion modes consume a single uniform
/// with the identical marginal law (proven exhaustively in the policy-law
/// tests) and make very large d affordable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    RankDraws,
    CdfUniform,
    CdfIntervalB2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCfg {
    pub ell: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "N")]
    pub n: u32,
    /// Task arrival rate (tasks per unit time, totalled over the system).
    pub lambda: f64,
    pub b: usize,
    #[serde(rename = "T")]
    pub t_max: f64,
    pub seed: u64,
    pub policies: Vec<PolicySpec>,
    #[serde(default = "default_snapshot_dt")]
    pub snapshot_dt: f64,
    /// Batch mode: arrival events carry `ell` tasks and occur at rate
    /// lambda/ell, so the task rate stays lambda.
    #[serde(default)]
    pub batch: Option<BatchCfg>,
    #[serde(default)]
    pub audit: bool,
    #[serde(default = "default_init")]
    pub init: InitialState,
    #[serde(default = "default_mode")]
    pub decision_mode: DecisionMode,
}

fn default_snapshot_dt() -> f64 {
    0.1
}
fn default_init() -> InitialState {
    InitialState::Empty
}
fn default_mode() -> DecisionMode {
    DecisionMode::RankDraws
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n < 1 {
            return Err("N must be at least 1".into());
        }
        if self.b < 1 {
            return Err("b must be at least 1".into());
        }
        if !(self.lambda >= 0.0) {
            return Err(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.t_max > 0.0) {
            return Err("T must be positive".into());
        }
        if !(self.snapshot_dt > 0.0) {
            return Err("snapshot_dt must be positive".into());
        }
        if self.policies.is_empty() {
            return Err("need at least one policy".into());
        }
        for p in &self.policies {
            p.validate(self.n).map_err(|e| format!("policy {}: {e}", p.label()))?;
        }

        let batch_policies = self.policies.iter().filter(|p| matches!(p, PolicySpec::BatchJsqD { .. }));
        match &self.batch {
            Some(bc) => {
                if bc.ell < 1 {
                    return Err("batch ell must be at least 1".into());
                }
                if self.policies.len() != 1 {
                    return Err("batch mode supports exactly one policy".into());
                }
                match &self.policies[0] {
                    PolicySpec::BatchJsqD { ell, .. } if *ell == bc.ell => {}
                    other => {
                        return Err(format!(
                            "batch mode requires a BATCH_JSQ_D policy with ell={}, got {}",
                            bc.ell,
                            other.label()
                        ))
                    }
                }
            }
            None => {
                if batch_policies.count() > 0 {
                    return Err("BATCH_JSQ_D policies require batch mode".into());
                }
            }
        }

        if self.policies.iter().any(|p| matches!(p, PolicySpec::PiC { .. })) {
            if self.policies.len() != 1 {
                return Err("the admission-threshold scheme runs uncoupled (one policy)".into());
            }
            if self.b != 2 || self.init != InitialState::AllBusy {
                return Err("the admission-threshold scheme needs b=2 and an all-busy start".into());
            }
        }

        match self.decision_mode {
            DecisionMode::RankDraws => {
                let consumers: Vec<&PolicySpec> =
                    self.policies.iter().filter(|p| p.rank_draws_needed() > 0).collect();
                let distinct = consumers.iter().filter(|p| p.wants_distinct_ranks()).count();
                if distinct > 0 && distinct < consumers.len() {
                    return Err(
                        "cannot couple with- and without-replacement sampling in one run".into()
                    );
                }
            }
            DecisionMode::CdfUniform | DecisionMode::CdfIntervalB2 => {
                if self.decision_mode == DecisionMode::CdfIntervalB2 && self.b != 2 {
                    return Err("the interval decision mode is specific to b=2".into());
                }
                for p in &self.policies {
                    let ok = matches!(
                        p,
                        PolicySpec::Jsq
                            | PolicySpec::JsqD { with_replacement: true, .. }
                            | PolicySpec::Mjsq { .. }
                            | PolicySpec::CjsqUniform { .. }
                            | PolicySpec::PiC { .. }
                    );
                    if !ok {
                        return Err(format!(
                            "policy {} cannot run in a single-uniform decision mode",
                            p.label()
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn initial_state(&self) -> OccupancyState {
        match self.init {
            InitialState::Empty => OccupancyState::empty(self.n, self.b),
            InitialState::AllBusy => OccupancyState::all_busy(self.n, self.b),
        }
    }

    /// Width of the shared rank-sample vector: the widest consumer, so every
    /// policy reads the same uniforms.
    fn d_max(&self) -> usize {
        match self.decision_mode {
            DecisionMode::RankDraws => {
                self.policies.iter().map(|p| p.rank_draws_needed()).max().unwrap_or(0)
            }
            _ => 0,
        }
    }

    fn distinct_ranks(&self) -> bool {
        self.decision_mode == DecisionMode::RankDraws
            && self.policies.iter().any(|p| p.wants_distinct_ranks())
    }

    /// Event rate of the arrival clock (batches count as one event).
    pub fn arrival_event_rate(&self) -> f64 {
        match &self.batch {
            Some(bc) => self.lambda / f64::from(bc.ell),
            None => self.lambda,
        }
    }
}

// ------------------------------------------------------------------------
// Errors
// ------------------------------------------------------------------------

#[derive(Debug)]
pub enum SimError {
    Config(String),
    Audit(Box<AuditViolation>),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Config(msg) => write!(f, "configuration error: {msg}"),
            SimError::Audit(v) => write!(f, "invariant violation: {v}"),
        }
    }
}

impl std::error::Error for SimError {}

/// Diagnostic dump for a per-event audit failure. Any occurrence means an
/// engine bug, never an expected outcome.
#[derive(Debug, Clone)]
pub struct AuditViolation {
    pub event_index: u64,
    pub t: f64,
    pub what: String,
    /// (policy label, tail counts, loss) for every coupled system.
    pub states: Vec<(String, Vec<u32>, u64)>,
}

impl fmt::Display for AuditViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event {} (t = {:.6}): {}", self.event_index, self.t, self.what)?;
        for (label, q, loss) in &self.states {
            write!(f, "; {label}: Q={q:?} L={loss}")?;
        }
        Ok(())
    }
}

// ------------------------------------------------------------------------
// Shared randomness stream
// ------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Arrival,
    PotentialDeparture,
}

/// One uniformized event consumed by every coupled system. `u_aux` carries
/// threshold/inversion decisions, `u_fallback` the uniform-over-window
/// choices, so schemes sharing a decision share the draw.
#[derive(Clone, Debug)]
pub struct CouplingDraw {
    pub t: f64,
    pub kind: EventKind,
    pub dep_rank: u32,
    pub rank_samples: Vec<u32>,
    pub u_aux: f64,
    pub u_fallback: f64,
}

impl CouplingDraw {
    fn empty() -> Self {
        CouplingDraw {
            t: 0.0,
            kind: EventKind::PotentialDeparture,
            dep_rank: 0,
            rank_samples: Vec::new(),
            u_aux: 0.0,
            u_fallback: 0.0,
        }
    }
}

/// Exponential event clock at total rate `arrival_rate + N`: each event is
/// an arrival with probability `arrival_rate / (arrival_rate + N)`, else a
/// potential departure at a uniform rank (a unit-rate clock per rank).
pub struct EventStream {
    rng: ChaCha8Rng,
    t: f64,
    total_rate: f64,
    p_arrival: f64,
    n: u32,
    d_max: usize,
    distinct: bool,
}

impl EventStream {
    pub fn new(n: u32, arrival_rate: f64, d_max: usize, distinct: bool, seed: u64) -> Self {
        assert!(n >= 1);
        assert!(arrival_rate >= 0.0);
        assert!(!distinct || d_max <= n as usize, "distinct sampling needs d <= N");
        let total_rate = arrival_rate + f64::from(n);
        EventStream {
            rng: rng_from(seed),
            t: 0.0,
            total_rate,
            p_arrival: arrival_rate / total_rate,
            n,
            d_max,
            distinct,
        }
    }

    pub fn next_draw(&mut self) -> CouplingDraw {
        let mut draw = CouplingDraw::empty();
        self.next_draw_into(&mut draw);
        draw
    }

    /// Fill `draw` in place; the rank-sample buffer is reused.
    pub fn next_draw_into(&mut self, draw: &mut CouplingDraw) {
        let u_gap: f64 = self.rng.random();
        self.t += -(1.0 - u_gap).ln() / self.total_rate;
        draw.t = self.t;
        if self.rng.random::<f64>() < self.p_arrival {
            draw.kind = EventKind::Arrival;
            draw.dep_rank = 0;
            draw.rank_samples.clear();
            if self.distinct {
                for idx in rand::seq::index::sample(&mut self.rng, self.n as usize, self.d_max) {
                    draw.rank_samples.push(idx as u32 + 1);
                }
            } else {
                for _ in 0..self.d_max {
                    draw.rank_samples.push(self.rng.random_range(1..=self.n));
                }
            }
            draw.u_aux = self.rng.random();
            draw.u_fallback = self.rng.random();
        } else {
            draw.kind = EventKind::PotentialDeparture;
            draw.dep_rank = self.rng.random_range(1..=self.n);
            draw.rank_samples.clear();
            draw.u_aux = 0.0;
            draw.u_fallback = 0.0;
        }
    }
}

// ------------------------------------------------------------------------
// One coupled step
// ------------------------------------------------------------------------

/// What each system did with one draw. `chosen_ranks[i]` is the arrival
/// target of system `i` (`None` for a refusal or a departure event);
/// decision-difference flags compare these entries.
#[derive(Clone, Debug, Default)]
pub struct StepOutcome {
    pub chosen_ranks: Vec<Option<u32>>,
    pub null_departures: Vec<bool>,
    pub pi_fallbacks: Vec<bool>,
}

/// Advance every system by one shared draw. Departures hit the same rank in
/// all systems (dummy-refilled at length-1 servers under the admission-
/// threshold scheme); arrivals let each policy consume the same uniforms.
pub fn step_coupled(
    states: &mut [OccupancyState],
    policies: &[PolicySpec],
    draw: &CouplingDraw,
    mode: DecisionMode,
) -> StepOutcome {
    let mut out = StepOutcome {
        chosen_ranks: vec![None; states.len()],
        null_departures: vec![false; states.len()],
        pi_fallbacks: vec![false; states.len()],
    };
    step_coupled_into(states, policies, draw, mode, &mut out);
    out
}

fn step_coupled_into(
    states: &mut [OccupancyState],
    policies: &[PolicySpec],
    draw: &CouplingDraw,
    mode: DecisionMode,
    out: &mut StepOutcome,
) {
    debug_assert_eq!(states.len(), policies.len());
    out.chosen_ranks.iter_mut().for_each(|x| *x = None);
    out.null_departures.iter_mut().for_each(|x| *x = false);
    out.pi_fallbacks.iter_mut().for_each(|x| *x = false);

    match draw.kind {
        EventKind::PotentialDeparture => {
            for (i, s) in states.iter_mut().enumerate() {
                if matches!(policies[i], PolicySpec::PiC { .. }) {
                    // A departing length-1 server is refilled by a dummy
                    // task at once: net no-op. Deeper departures proceed.
                    if s.rank_queue_len(draw.dep_rank) >= 2 {
                        s.apply_departure_at_rank(draw.dep_rank);
                    }
                } else if s.apply_departure_at_rank(draw.dep_rank).is_none() {
                    out.null_departures[i] = true;
                }
            }
        }
        EventKind::Arrival => {
            for (i, s) in states.iter_mut().enumerate() {
                apply_arrival_decision(s, &policies[i], draw, mode, i, out);
            }
        }
    }
}

fn apply_arrival_decision(
    s: &mut OccupancyState,
    spec: &PolicySpec,
    draw: &CouplingDraw,
    mode: DecisionMode,
    i: usize,
    out: &mut StepOutcome,
) {
    // Lowest rank currently holding queue length exactly `len`; well defined
    // whenever such a server exists.
    fn lowest_rank_at(s: &OccupancyState, len: Level) -> u32 {
        s.n() - s.level_count(len) + 1
    }
    match spec {
        PolicySpec::Jsq => {
            out.chosen_ranks[i] = Some(1);
            s.apply_arrival_at_rank(1);
        }
        PolicySpec::Mjsq { n } => {
            out.chosen_ranks[i] = Some(n + 1);
            s.apply_arrival_at_rank(n + 1);
        }
        PolicySpec::CjsqUniform { n } => {
            match decide_cjsq_uniform(s, *n, draw.u_fallback) {
                ArrivalDecision::AssignRank(r) => {
                    out.chosen_ranks[i] = Some(r);
                    s.apply_arrival_at_rank(r);
                }
                ArrivalDecision::Discard => unreachable!(),
            }
        }
        PolicySpec::JsqD { d, .. } => match mode {
            DecisionMode::RankDraws => {
                let r = *draw.rank_samples[..*d].iter().min().expect("rank draws present");
                out.chosen_ranks[i] = Some(r);
                s.apply_arrival_at_rank(r);
            }
            DecisionMode::CdfUniform => {
                let len = decide_jsq_d_cdf(s, *d, draw.u_aux);
                out.chosen_ranks[i] = Some(lowest_rank_at(s, len));
                s.apply_arrival_at_level(len);
            }
            DecisionMode::CdfIntervalB2 => {
                let len = decide_jsq_d_interval_b2(s, *d, draw.u_aux);
                out.chosen_ranks[i] = Some(lowest_rank_at(s, len));
                s.apply_arrival_at_level(len);
            }
        },
        PolicySpec::JsqNd { n, d } => {
            match decide_jsq_nd(s, *n, *d, &draw.rank_samples, draw.u_fallback) {
                ArrivalDecision::AssignRank(r) => {
                    out.chosen_ranks[i] = Some(r);
                    s.apply_arrival_at_rank(r);
                }
                ArrivalDecision::Discard => unreachable!(),
            }
        }
        PolicySpec::PiC { c, d } => match decide_pi_c(s, *c, *d, draw.u_aux) {
            PiCDecision::Assign { rank, fallback } => {
                out.chosen_ranks[i] = Some(rank);
                out.pi_fallbacks[i] = fallback;
                s.apply_arrival_at_rank(rank);
            }
            PiCDecision::Discard => {
                s.record_discard();
            }
        },
        PolicySpec::BatchJsqD { ell, .. } => {
            let chosen = crate::policy::decide_batch_jsq_d(*ell as usize, &draw.rank_samples);
            // All tasks land against the queue lengths recorded at the
            // arrival instant: simultaneous assignment.
            let lens: Vec<Level> = chosen.iter().map(|&r| s.rank_queue_len(r)).collect();
            out.chosen_ranks[i] = Some(chosen[0]);
            for len in lens {
                s.apply_arrival_at_level(len);
            }
        }
    }
}

// ------------------------------------------------------------------------
// Coupled run
// ------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: f64,
    pub state: OccupancyState,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub label: String,
    pub n: u32,
    pub b: usize,
    pub snapshots: Vec<Snapshot>,
    pub terminal: OccupancyState,
    /// Running maximum of each tail count over the whole event path (not
    /// just the snapshot grid).
    pub max_level: Vec<u32>,
    pub null_departures: u64,
    pub pi_fallbacks: u64,
}

/// Decision-difference bookkeeping for one unordered policy pair.
#[derive(Clone, Debug)]
pub struct PairStats {
    pub first: usize,
    pub second: usize,
    /// Arrivals where the two chosen targets differed.
    pub delta_total: u64,
    /// Arrivals whose d sampled ranks all missed the n lowest servers; only
    /// counted for a power-of-d / windowed-hybrid pair, where this event has
    /// an exact Binomial(A, (1-n/N)^d) law and dominates `delta_total`.
    pub window_miss: u64,
    pub delta_at_snapshots: Vec<(f64, u64)>,
}

#[derive(Debug)]
pub struct CoupledResult {
    pub trajectories: Vec<Trajectory>,
    pub pairs: Vec<PairStats>,
    /// Arrival events up to the horizon.
    pub arrivals: u64,
    pub events: u64,
}

impl CoupledResult {
    pub fn pair(&self, first: usize, second: usize) -> &PairStats {
        self.pairs
            .iter()
            .find(|p| (p.first, p.second) == (first, second))
            .expect("no such policy pair")
    }
}

/// Ordering-audit roles: a shortest-queue system, a maximally sloppy system
/// with window `n`, and every windowed member in between.
struct OrderingRoles {
    jsq: usize,
    mjsq: usize,
    members: Vec<usize>,
}

fn ordering_roles(policies: &[PolicySpec]) -> Option<OrderingRoles> {
    let jsq = policies.iter().position(|p| matches!(p, PolicySpec::Jsq))?;
    let (mjsq, window) = policies.iter().enumerate().find_map(|(i, p)| match p {
        PolicySpec::Mjsq { n } => Some((i, *n)),
        _ => None,
    })?;
    let members: Vec<usize> = policies
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match p {
            PolicySpec::Mjsq { n } if *n == window => Some(i),
            PolicySpec::CjsqUniform { n } if *n == window => Some(i),
            PolicySpec::JsqNd { n, .. } if *n == window => Some(i),
            _ => None,
        })
        .collect();
    Some(OrderingRoles { jsq, mjsq, members })
}

/// Window-miss configuration for one pair: Some((d, n)) when the pair is a
/// power-of-d scheme against the windowed hybrid with the same d.
fn window_miss_cfg(a: &PolicySpec, b: &PolicySpec) -> Option<(usize, u32)> {
    match (a, b) {
        (PolicySpec::JsqD { d: d1, .. }, PolicySpec::JsqNd { n, d: d2 }) if d1 == d2 => {
            Some((*d1, *n))
        }
        (PolicySpec::JsqNd { n, d: d2 }, PolicySpec::JsqD { d: d1, .. }) if d1 == d2 => {
            Some((*d1, *n))
        }
        _ => None,
    }
}

/// Tail-sum orderings and the sandwich bounds, checked after an event.
fn assert_orderings(
    states: &[OccupancyState],
    roles: &OrderingRoles,
    b: usize,
) -> Result<(), String> {
    let jsq = &states[roles.jsq];
    let mjsq = &states[roles.mjsq];
    for m in 1..=b {
        let lo = jsq.tail_sum(m);
        let hi = mjsq.tail_sum(m);
        if lo > hi {
            return Err(format!("tail_sum({m}) ordering broken: shortest-queue > sloppiest"));
        }
        for &mem in &roles.members {
            let mid = states[mem].tail_sum(m);
            if !(lo <= mid && mid <= hi) {
                return Err(format!(
                    "tail_sum({m}) ordering broken for member {mem}: {lo} <= {mid} <= {hi}"
                ));
            }
            let q_m = i128::from(states[mem].level_count(m));
            let lower = lo as i128 - mjsq.tail_sum(m + 1) as i128;
            let upper = hi as i128 - jsq.tail_sum(m + 1) as i128;
            if !(lower <= q_m && q_m <= upper) {
                return Err(format!(
                    "level-{m} sandwich broken for member {mem}: {lower} <= {q_m} <= {upper}"
                ));
            }
        }
    }
    Ok(())
}

/// `sum_i |Q_i^A - Q_i^B| <= 2 * (decision differences so far)`.
fn l1_delta_bound_check(a: &OccupancyState, b: &OccupancyState, delta: u64) -> Result<(), String> {
    let l1: u64 = a
        .levels()
        .iter()
        .zip(b.levels())
        .map(|(&x, &y)| u64::from(x.abs_diff(y)))
        .sum();
    if l1 > 2 * delta {
        return Err(format!("l1 distance {l1} exceeds twice the decision differences {delta}"));
    }
    Ok(())
}

/// Evolve every configured policy on one shared stream. Deterministic given
/// (config, seed); snapshots on the uniform grid record the pre-event state.
pub fn run_coupled(cfg: &SimConfig) -> Result<CoupledResult, SimError> {
    cfg.validate().map_err(SimError::Config)?;
    let k = cfg.policies.len();
    let b = cfg.b;
    let mut stream =
        EventStream::new(cfg.n, cfg.arrival_event_rate(), cfg.d_max(), cfg.distinct_ranks(), cfg.seed);

    let init = cfg.initial_state();
    let mut states = vec![init; k];
    let mut max_level: Vec<Vec<u32>> = states.iter().map(|s| s.levels().to_vec()).collect();
    let mut null_departures = vec![0u64; k];
    let mut pi_fallbacks = vec![0u64; k];
    let mut snapshots: Vec<Vec<Snapshot>> = vec![Vec::new(); k];

    let mut pairs: Vec<PairStats> = Vec::new();
    let mut pair_miss: Vec<Option<(usize, u32)>> = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            pairs.push(PairStats {
                first: i,
                second: j,
                delta_total: 0,
                window_miss: 0,
                delta_at_snapshots: Vec::new(),
            });
            pair_miss.push(window_miss_cfg(&cfg.policies[i], &cfg.policies[j]));
        }
    }

    let roles = if cfg.audit { ordering_roles(&cfg.policies) } else { None };

    let grid_points = (cfg.t_max / cfg.snapshot_dt + 1e-9).floor() as usize + 1;
    let mut next_grid = 0usize;
    let record_grid_point = |idx: usize,
                                 states: &[OccupancyState],
                                 snapshots: &mut Vec<Vec<Snapshot>>,
                                 pairs: &mut Vec<PairStats>| {
        let t = idx as f64 * cfg.snapshot_dt;
        for (snap, s) in snapshots.iter_mut().zip(states) {
            snap.push(Snapshot { t, state: s.clone() });
        }
        for p in pairs.iter_mut() {
            p.delta_at_snapshots.push((t, p.delta_total));
        }
    };

    let mut draw = CouplingDraw::empty();
    let mut outcome = StepOutcome {
        chosen_ranks: vec![None; k],
        null_departures: vec![false; k],
        pi_fallbacks: vec![false; k],
    };
    let mut arrivals = 0u64;
    let mut events = 0u64;

    loop {
        stream.next_draw_into(&mut draw);
        if draw.t > cfg.t_max {
            break;
        }
        while next_grid < grid_points && (next_grid as f64) * cfg.snapshot_dt < draw.t {
            record_grid_point(next_grid, &states, &mut snapshots, &mut pairs);
            next_grid += 1;
        }
        events += 1;

        step_coupled_into(&mut states, &cfg.policies, &draw, cfg.decision_mode, &mut outcome);

        if draw.kind == EventKind::Arrival {
            arrivals += 1;
            for i in 0..k {
                for (ml, &q) in max_level[i].iter_mut().zip(states[i].levels()) {
                    if q > *ml {
                        *ml = q;
                    }
                }
            }
            let mut pair_idx = 0;
            for i in 0..k {
                for j in (i + 1)..k {
                    let p = &mut pairs[pair_idx];
                    if outcome.chosen_ranks[i] != outcome.chosen_ranks[j] {
                        p.delta_total += 1;
                    }
                    if let Some((d, n)) = pair_miss[pair_idx] {
                        let min_rank =
                            *draw.rank_samples[..d].iter().min().expect("rank draws present");
                        if min_rank > n {
                            p.window_miss += 1;
                        }
                        debug_assert!(p.delta_total <= p.window_miss);
                    }
                    pair_idx += 1;
                }
            }
        } else {
            for i in 0..k {
                if outcome.null_departures[i] {
                    null_departures[i] += 1;
                }
            }
        }
        for i in 0..k {
            if outcome.pi_fallbacks[i] {
                pi_fallbacks[i] += 1;
            }
        }

        if cfg.audit {
            let mut fail: Option<String> = None;
            if let Some(r) = &roles {
                if let Err(msg) = assert_orderings(&states, r, b) {
                    fail = Some(msg);
                }
            }
            if fail.is_none() {
                for p in &pairs {
                    if let Err(msg) =
                        l1_delta_bound_check(&states[p.first], &states[p.second], p.delta_total)
                    {
                        fail = Some(format!(
                            "pair ({}, {}): {msg}",
                            cfg.policies[p.first].label(),
                            cfg.policies[p.second].label()
                        ));
                        break;
                    }
                }
            }
            if let Some(what) = fail {
                return Err(SimError::Audit(Box::new(AuditViolation {
                    event_index: events,
                    t: draw.t,
                    what,
                    states: cfg
                        .policies
                        .iter()
                        .zip(&states)
                        .map(|(p, s)| (p.label(), s.levels().to_vec(), s.loss()))
                        .collect(),
                })));
            }
        }
    }

    while next_grid < grid_points {
        record_grid_point(next_grid, &states, &mut snapshots, &mut pairs);
        next_grid += 1;
    }

    let trajectories = cfg
        .policies
        .iter()
        .enumerate()
        .map(|(i, p)| Trajectory {
            label: p.label(),
            n: cfg.n,
            b,
            snapshots: std::mem::take(&mut snapshots[i]),
            terminal: states[i].clone(),
            max_level: std::mem::take(&mut max_level[i]),
            null_departures: null_departures[i],
            pi_fallbacks: pi_fallbacks[i],
        })
        .collect();

    Ok(CoupledResult { trajectories, pairs, arrivals, events })
}

/// Run the admission-threshold scheme on the two-level all-busy system.
/// Validation is strict here because the dummy-refill rule only makes sense
/// in that regime.
pub fn run_pi_c_mode(cfg: &SimConfig) -> Result<CoupledResult, SimError> {
    if !cfg.policies.iter().all(|p| matches!(p, PolicySpec::PiC { .. })) {
        return Err(SimError::Config("run_pi_c_mode needs a PI_C policy".into()));
    }
    run_coupled(cfg)
}

/// Empirical mean and z-score comparison of per-replication window-miss
/// counts against the exact Binomial mean `A(T) * (1 - n/N)^d`. Returns
/// (observed mean, predicted mean, z).
pub fn delta_tail_check(samples: &[(u64, u64)], n_servers: u32, n: u32, d: usize) -> (f64, f64, f64) {
    assert!(!samples.is_empty());
    let p = (1.0 - f64::from(n) / f64::from(n_servers)).powi(d as i32);
    let diffs: Vec<f64> =
        samples.iter().map(|&(a, delta)| delta as f64 - p * a as f64).collect();
    let observed = samples.iter().map(|&(_, delta)| delta as f64).sum::<f64>() / samples.len() as f64;
    let predicted = p * samples.iter().map(|&(a, _)| a as f64).sum::<f64>() / samples.len() as f64;
    let m = crate::stats::mean(&diffs);
    let z = if diffs.len() >= 2 {
        let sd = crate::stats::sample_sd(&diffs);
        if sd == 0.0 {
            if m == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            m / (sd / (diffs.len() as f64).sqrt())
        }
    } else {
        0.0
    };
    (observed, predicted, z)
}
