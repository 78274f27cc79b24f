//! Deterministic mean-field machinery: the piecewise assignment
//! coefficients, the ODE right-hand side, a fixed-step RK4 integrator with
//! simplex projection, the fixed point, and the batch-arrival closed form.

use crate::occupancy::FluidState;
use thiserror::Error;

/// Values within this distance of 1.0 count as exactly 1 in the boundary
/// index `m(q)`. The right-hand side is discontinuous on the set {q_i = 1};
/// a hard tolerance makes floating-point behavior deterministic there.
pub const TAU_ONE: f64 = 1e-9;

/// Default integrator step.
pub const DEFAULT_H: f64 = 1e-3;

/// Accumulated projection above this triggers the step-size warning.
pub const PROJECTION_WARN: f64 = 1e-2;

#[derive(Debug, Error, PartialEq)]
pub enum FluidError {
    #[error("fixed point requires 0 < lambda < 1, got {0}")]
    LoadOutOfRange(f64),
}

/// Boundary index `m(q) = min{i >= 0 : q_{i+1} < 1}`, with `q_{b+1} = 0`.
pub fn m_of_q(q: &FluidState) -> usize {
    q.q.iter().position(|&x| x < 1.0 - TAU_ONE).unwrap_or(q.q.len())
}

/// Assignment fractions: `p[i]` is the fraction of incoming fluid joining
/// servers of queue length exactly `i`. All mass goes to length `m(q)-1` and
/// `m(q)` servers (or to idle servers when `m(q) = 0`); the split keeps the
/// full levels exactly full.
pub fn p_coeffs(q: &FluidState, lambda: f64) -> Vec<f64> {
    assert!(lambda > 0.0, "arrival rate must be positive");
    let b = q.q.len();
    let m = m_of_q(q);
    let mut p = vec![0.0; b];
    if m == 0 {
        p[0] = 1.0;
        return p;
    }
    let q_next = if m < b { q.q[m] } else { 0.0 };
    let frac = ((1.0 - q_next) / lambda).min(1.0);
    p[m - 1] = frac;
    if m < b {
        p[m] = 1.0 - frac;
    } else {
        // Mass spilling past the deepest level only happens at lambda > 1,
        // outside the regime the fluid limit is stated for.
        assert!(
            1.0 - frac < 1e-9,
            "assignment coefficients undefined: all levels full at lambda = {lambda} > 1"
        );
    }
    p
}

/// `dq_i/dt = lambda * p_{i-1}(q) - (q_i - q_{i+1})`, with `q_{b+1} = 0`.
pub fn fluid_rhs(q: &FluidState, lambda: f64) -> Vec<f64> {
    let b = q.q.len();
    let p = p_coeffs(q, lambda);
    (0..b)
        .map(|j| {
            let q_next = if j + 1 < b { q.q[j + 1] } else { 0.0 };
            lambda * p[j] - (q.q[j] - q_next)
        })
        .collect()
}

/// The unique rest point `(lambda, 0, ..., 0)` of the subcritical dynamics.
pub fn fixed_point(lambda: f64, b: usize) -> Result<FluidState, FluidError> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(FluidError::LoadOutOfRange(lambda));
    }
    let mut q = vec![0.0; b];
    q[0] = lambda;
    Ok(FluidState::new(q))
}

/// Closed-form head coordinate under batch arrivals from a subcritical
/// start: `q_1(t) = lambda + (q1_0 - lambda) e^{-t}`, deeper levels zero.
pub fn batch_closed_form(q1_0: f64, lambda: f64, t: f64, b: usize) -> FluidState {
    assert!((0.0..=lambda).contains(&q1_0), "closed form needs 0 <= q1(0) <= lambda");
    let mut q = vec![0.0; b];
    q[0] = lambda + (q1_0 - lambda) * (-t).exp();
    FluidState::new(q)
}

/// Clamp to [0,1] and enforce the nonincreasing order by cumulative min;
/// returns the l1 distance moved.
fn project_onto_simplex(q: &mut [f64]) -> f64 {
    let mut moved = 0.0;
    let mut prev = 1.0f64;
    for x in q.iter_mut() {
        let clamped = x.clamp(0.0, prev);
        moved += (*x - clamped).abs();
        *x = clamped;
        prev = clamped;
    }
    moved
}

/// ODE trajectory on the uniform step grid `0, h, 2h, ...`.
#[derive(Clone, Debug)]
pub struct FluidSolution {
    pub h: f64,
    pub states: Vec<FluidState>,
    /// Total l1 magnitude of post-step projections onto the simplex; a
    /// convergence diagnostic that must vanish as h -> 0.
    pub projection_l1: f64,
    pub step_warning: bool,
}

impl FluidSolution {
    pub fn t_max(&self) -> f64 {
        (self.states.len() - 1) as f64 * self.h
    }

    /// State at grid time `t`, which must land on the step grid.
    pub fn at(&self, t: f64) -> &FluidState {
        let idx = (t / self.h).round() as usize;
        assert!(
            idx < self.states.len() && (idx as f64 * self.h - t).abs() < 0.5 * self.h,
            "t = {t} is not on the integration grid"
        );
        &self.states[idx]
    }
}

/// Fixed-step classical RK4 with the boundary index and assignment
/// coefficients recomputed at every stage. Stage inputs and step outputs are
/// projected onto the simplex; only the output projection is recorded.
pub fn integrate_fluid(q0: &FluidState, lambda: f64, t_max: f64, h: f64) -> FluidSolution {
    assert!(h > 0.0 && t_max > 0.0);
    let steps = (t_max / h).round() as usize;
    assert!(
        (steps as f64 * h - t_max).abs() < 1e-6 * t_max.max(1.0),
        "horizon must be a whole number of steps"
    );
    let b = q0.q.len();
    let rhs_projected = |v: &[f64]| {
        let mut w = v.to_vec();
        project_onto_simplex(&mut w);
        fluid_rhs(&FluidState::new(w), lambda)
    };

    let mut states = Vec::with_capacity(steps + 1);
    let mut y = q0.q.clone();
    project_onto_simplex(&mut y);
    states.push(FluidState::new(y.clone()));
    let mut projection_l1 = 0.0;

    let mut stage = vec![0.0; b];
    for _ in 0..steps {
        let k1 = rhs_projected(&y);
        for j in 0..b {
            stage[j] = y[j] + 0.5 * h * k1[j];
        }
        let k2 = rhs_projected(&stage);
        for j in 0..b {
            stage[j] = y[j] + 0.5 * h * k2[j];
        }
        let k3 = rhs_projected(&stage);
        for j in 0..b {
            stage[j] = y[j] + h * k3[j];
        }
        let k4 = rhs_projected(&stage);
        for j in 0..b {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        projection_l1 += project_onto_simplex(&mut y);
        states.push(FluidState::new(y.clone()));
    }

    FluidSolution { h, states, projection_l1, step_warning: projection_l1 > PROJECTION_WARN }
}
