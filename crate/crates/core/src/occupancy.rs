//! Exact integer occupancy state for a bank of N exchangeable servers.
//!
//! Only tail counts are stored: `Q_i` is the number of servers holding at
//! least `i` tasks. Every dispatching rule in this crate treats equal-length
//! servers as interchangeable, so per-server identity carries no information;
//! the rank order (shortest queue first, ties in canonical sorted order) is
//! fully determined by the tail counts. Updates are O(b) per event.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Queue-length level. Level 0 is an idle server, level `b` a full one.
pub type Level = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("tail counts must be nonincreasing: Q_{index} = {value} exceeds Q_{} = {prev}", index - 1)]
    NonMonotone { index: usize, value: u32, prev: u32 },
    #[error("Q_1 = {q1} exceeds server count N = {n}")]
    CountExceedsServers { q1: u32, n: u32 },
    #[error("buffer depth must be at least 1")]
    EmptyBuffer,
    #[error("server count must be at least 1")]
    NoServers,
}

/// Tail-count occupancy state plus the cumulative overflow counter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyState {
    n: u32,
    q: Vec<u32>,
    loss: u64,
}

impl OccupancyState {
    /// All servers idle.
    pub fn empty(n: u32, b: usize) -> Self {
        assert!(n >= 1, "need at least one server");
        assert!(b >= 1, "need at least one buffer level");
        OccupancyState { n, q: vec![0; b], loss: 0 }
    }

    /// Every server holding exactly one task.
    pub fn all_busy(n: u32, b: usize) -> Self {
        let mut s = Self::empty(n, b);
        s.q[0] = n;
        s
    }

    pub fn from_tail_counts(n: u32, q: &[u32], loss: u64) -> Result<Self, StateError> {
        if n == 0 {
            return Err(StateError::NoServers);
        }
        if q.is_empty() {
            return Err(StateError::EmptyBuffer);
        }
        if q[0] > n {
            return Err(StateError::CountExceedsServers { q1: q[0], n });
        }
        for i in 1..q.len() {
            if q[i] > q[i - 1] {
                return Err(StateError::NonMonotone { index: i + 1, value: q[i], prev: q[i - 1] });
            }
        }
        Ok(OccupancyState { n, q: q.to_vec(), loss })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn b(&self) -> usize {
        self.q.len()
    }

    pub fn loss(&self) -> u64 {
        self.loss
    }

    /// Tail count `Q_i`; `Q_0 = N` by convention.
    pub fn level_count(&self, i: Level) -> u32 {
        if i == 0 {
            self.n
        } else {
            self.q[i - 1]
        }
    }

    /// The stored tail counts `Q_1..Q_b`.
    pub fn levels(&self) -> &[u32] {
        &self.q
    }

    pub fn total_tasks(&self) -> u64 {
        self.q.iter().map(|&x| u64::from(x)).sum()
    }

    /// Queue length of the rank-`r` server (shortest first): the largest
    /// level `i` with at least `N - r + 1` servers at or above it.
    pub fn rank_queue_len(&self, r: u32) -> Level {
        assert!(r >= 1 && r <= self.n, "rank {r} out of range 1..={}", self.n);
        let threshold = self.n - r + 1;
        let mut len = 0;
        while len < self.b() && self.q[len] >= threshold {
            len += 1;
        }
        len
    }

    /// Admit one task at the rank-`r` server. Returns the server's queue
    /// length before the arrival; a return of `b` means the task overflowed
    /// and was discarded.
    pub fn apply_arrival_at_rank(&mut self, r: u32) -> Level {
        let len = self.rank_queue_len(r);
        self.apply_arrival_at_level(len);
        len
    }

    /// Admit one task at some server whose current queue length is `len`.
    /// Used by decision paths that resolve a target length directly and by
    /// batch application against a recorded snapshot.
    pub fn apply_arrival_at_level(&mut self, len: Level) {
        if len == self.b() {
            self.loss += 1;
        } else {
            debug_assert!(
                self.level_count(len) > self.level_count(len + 1),
                "no server has queue length exactly {len}"
            );
            self.q[len] += 1;
        }
    }

    /// Complete one service at the rank-`r` server. Null (returns `None`)
    /// when that rank is idle.
    pub fn apply_departure_at_rank(&mut self, r: u32) -> Option<Level> {
        let len = self.rank_queue_len(r);
        if len == 0 {
            None
        } else {
            self.q[len - 1] -= 1;
            Some(len)
        }
    }

    /// Count a discarded task without touching the queue counts.
    pub fn record_discard(&mut self) {
        self.loss += 1;
    }

    /// `Σ_{i=m}^{b} Q_i + L`, the quantity whose ordering the coupling
    /// preserves. `m` may be `b + 1`, in which case only `L` remains.
    pub fn tail_sum(&self, m: usize) -> u64 {
        assert!(m >= 1 && m <= self.b() + 1, "tail index {m} out of range");
        self.q[m - 1..].iter().map(|&x| u64::from(x)).sum::<u64>() + self.loss
    }

    pub fn fluid_scale(&self) -> FluidState {
        let n = f64::from(self.n);
        FluidState { q: self.q.iter().map(|&x| f64::from(x) / n).collect() }
    }

    /// Centered √N scaling of the first `k` levels: the first coordinate is
    /// the (nonpositive) centered idle deficit, the rest are raw tail counts
    /// over √N. The reflection accumulator starts at zero.
    pub fn diffusion_scale(&self, k: usize) -> DiffusionState {
        assert!(k >= 1 && k <= self.b(), "diffusion depth {k} out of range");
        let root_n = f64::from(self.n).sqrt();
        let mut qbar = Vec::with_capacity(k);
        qbar.push(-f64::from(self.n - self.q[0]) / root_n);
        for i in 1..k {
            qbar.push(f64::from(self.q[i]) / root_n);
        }
        DiffusionState { qbar, u1: 0.0 }
    }

    pub fn check_valid(&self) -> Result<(), StateError> {
        Self::from_tail_counts(self.n, &self.q, self.loss).map(|_| ())
    }
}

/// Fluid-scaled occupancy: fractions of servers at or above each level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidState {
    pub q: Vec<f64>,
}

impl FluidState {
    pub fn new(q: Vec<f64>) -> Self {
        FluidState { q }
    }

    /// Membership in the monotone unit cube, up to `tol` slack per bound.
    pub fn in_simplex(&self, tol: f64) -> bool {
        let mut prev = 1.0 + tol;
        for &x in &self.q {
            if x < -tol || x > prev + tol {
                return false;
            }
            prev = x;
        }
        true
    }

    pub fn l1_distance(&self, other: &FluidState) -> f64 {
        assert_eq!(self.q.len(), other.q.len(), "mismatched fluid depths");
        self.q.iter().zip(&other.q).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Centered/scaled occupancy for the critically loaded regime, tracking the
/// accumulated boundary reflection of the first coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionState {
    pub qbar: Vec<f64>,
    pub u1: f64,
}

impl DiffusionState {
    pub fn point(qbar: Vec<f64>) -> Self {
        assert!(!qbar.is_empty());
        assert!(qbar[0] <= 0.0, "first coordinate must be nonpositive");
        DiffusionState { qbar, u1: 0.0 }
    }
}
