//! Euler–Maruyama paths of the critically loaded limit process: a Brownian
//! first coordinate reflected at zero, whose boundary pushing feeds the
//! second coordinate, with noise-free linear relaxation below that.

use crate::occupancy::DiffusionState;
use crate::rng::{derive_seed, rng_from};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const DEFAULT_H: f64 = 1e-3;
pub const DEFAULT_REPS: usize = 500;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionParams {
    pub beta: f64,
    /// Tracked levels; coordinate 1 is the reflected one.
    pub k: usize,
    #[serde(rename = "T")]
    pub t_max: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    /// Multiplies the Brownian increments; zero gives the deterministic
    /// skeleton used by the closed-form checks.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
}

fn default_h() -> f64 {
    DEFAULT_H
}
fn default_noise() -> f64 {
    1.0
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta > 0.0) {
            return Err(format!("beta must be positive, got {}", self.beta));
        }
        if self.k < 2 {
            return Err(format!("need k >= 2 tracked levels, got {}", self.k));
        }
        if !(self.h > 0.0 && self.t_max > 0.0) {
            return Err("T and h must be positive".into());
        }
        if self.noise_scale < 0.0 {
            return Err("noise_scale must be nonnegative".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        let steps = (self.t_max / self.h).round() as usize;
        assert!(
            (steps as f64 * self.h - self.t_max).abs() < 1e-6 * self.t_max.max(1.0),
            "horizon must be a whole number of steps"
        );
        steps
    }
}

/// One explicit step with projection-style reflection at zero: the tentative
/// first coordinate `y = Q1 + sqrt(2) dW - beta h + (Q2 - Q1) h` is kept if
/// nonpositive, else Q1 snaps to 0 and the overshoot `dU` is pushed into Q2.
/// Deeper coordinates relax linearly toward the next one down. Returns `dU`.
pub fn sde_step(s: &mut DiffusionState, beta: f64, h: f64, dw: f64) -> f64 {
    let k = s.qbar.len();
    debug_assert!(k >= 1);
    let q1 = s.qbar[0];
    let q2 = if k >= 2 { s.qbar[1] } else { 0.0 };
    let y = q1 + std::f64::consts::SQRT_2 * dw - beta * h + (-q1 + q2) * h;
    let du = if y <= 0.0 {
        s.qbar[0] = y;
        0.0
    } else {
        s.qbar[0] = 0.0;
        y
    };
    // Ascending update order reads each next coordinate pre-step.
    for i in 1..k {
        let next = if i + 1 < k { s.qbar[i + 1] } else { 0.0 };
        let inflow = if i == 1 { du } else { 0.0 };
        s.qbar[i] += inflow - (s.qbar[i] - next) * h;
    }
    s.u1 += du;
    du
}

/// Per-step record kept when a path audit is requested.
#[derive(Clone, Debug)]
pub struct SdeStepRecord {
    pub t: f64,
    pub state: DiffusionState,
    pub du: f64,
}

/// Simulate one path; optionally record every step for auditing.
pub fn simulate_path(
    params: &DiffusionParams,
    init: &DiffusionState,
    seed: u64,
    record: bool,
) -> (DiffusionState, Vec<SdeStepRecord>) {
    assert_eq!(init.qbar.len(), params.k, "initial state width must match k");
    let mut rng = rng_from(seed);
    let mut s = init.clone();
    let mut steps_log = Vec::new();
    let scale = params.h.sqrt() * params.noise_scale;
    for i in 0..params.steps() {
        let z: f64 = rng.sample(StandardNormal);
        let du = sde_step(&mut s, params.beta, params.h, z * scale);
        if record {
            steps_log.push(SdeStepRecord {
                t: (i + 1) as f64 * params.h,
                state: s.clone(),
                du,
            });
        }
    }
    (s, steps_log)
}

/// Terminal states of independent replications under derived seeds.
pub fn simulate_terminals(
    params: &DiffusionParams,
    init: &DiffusionState,
    reps: usize,
    master_seed: u64,
) -> Vec<DiffusionState> {
    (0..reps)
        .map(|r| simulate_path(params, init, derive_seed(master_seed, r as u64), false).0)
        .collect()
}

/// The pushing process may only act on the boundary: every step with
/// `dU > 0` must leave the first coordinate exactly at zero.
pub fn complementarity_audit(path: &[SdeStepRecord]) -> Result<(), String> {
    for rec in path {
        if rec.du > 0.0 && rec.state.qbar[0] != 0.0 {
            return Err(format!(
                "pushing off the boundary at t = {}: dU = {} with Q1 = {}",
                rec.t, rec.du, rec.state.qbar[0]
            ));
        }
        if rec.du < 0.0 {
            return Err(format!("negative push dU = {} at t = {}", rec.du, rec.t));
        }
    }
    Ok(())
}

/// Zero-noise closed form for the two-coordinate system started strictly
/// inside the negative half-line (no reflection):
/// `x(t) = e^{-t} (x0 + beta + y0 t) - beta`, `y(t) = y0 e^{-t}`.
pub fn linear_pair_closed_form(x0: f64, y0: f64, beta: f64, t: f64) -> (f64, f64) {
    let e = (-t).exp();
    (e * (x0 + beta + y0 * t) - beta, y0 * e)
}
