//! Small statistics toolbox: two-sample Kolmogorov–Smirnov distance, sample
//! moments and quantiles, and the time-average estimator over trajectory
//! snapshots.

use crate::occupancy::FluidState;
use crate::sim::Trajectory;

/// Sup distance between the empirical CDFs of two samples, by sort-merge.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "KS distance needs nonempty samples");
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_unstable_by(|p, q| p.total_cmp(q));
    ys.sort_unstable_by(|p, q| p.total_cmp(q));
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        // Advance past ties together so both CDFs are evaluated at the jump.
        let x = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= x {
            i += 1;
        }
        while j < ys.len() && ys[j] <= x {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    sup.max(1.0 - (i as f64 / na).min(j as f64 / nb))
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n−1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    assert!(xs.len() >= 2);
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Median by sorting a copy; midpoint average for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_unstable_by(|p, q| p.total_cmp(q));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time average of fluid-scaled snapshots strictly after `burn_in`. The grid
/// is uniform, so the time average is the plain mean over retained points.
pub fn stationary_estimate(traj: &Trajectory, burn_in: f64) -> FluidState {
    let n = f64::from(traj.n);
    let mut acc = vec![0.0; traj.b];
    let mut count = 0usize;
    for snap in &traj.snapshots {
        if snap.t > burn_in {
            for (a, &q) in acc.iter_mut().zip(snap.state.levels()) {
                *a += f64::from(q) / n;
            }
            count += 1;
        }
    }
    assert!(count > 0, "burn_in consumed every snapshot");
    for a in &mut acc {
        *a /= count as f64;
    }
    FluidState::new(acc)
}
