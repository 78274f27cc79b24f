//! Pure arrival-decision rules. Every function maps (state, explicit shared
//! randomness) to a target rank, target queue length, or a discard; nothing
//! here draws randomness internally, so coupled systems can feed the same
//! draws to different rules.

use crate::occupancy::{Level, OccupancyState};
use serde::{Deserialize, Serialize};

/// Outcome of an arrival decision: a server rank to join, or a refusal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrivalDecision {
    AssignRank(u32),
    Discard,
}

/// Join the shortest queue: always rank 1 in the canonical sorted order.
pub fn decide_jsq(_s: &OccupancyState) -> ArrivalDecision {
    ArrivalDecision::AssignRank(1)
}

/// Join the shortest among `d` sampled servers. With the sorted order the
/// minimum sampled rank holds the minimum sampled queue length.
pub fn decide_jsq_d(_s: &OccupancyState, d: usize, ranks: &[u32]) -> ArrivalDecision {
    assert!(d >= 1 && ranks.len() >= d, "need {d} rank draws, got {}", ranks.len());
    ArrivalDecision::AssignRank(*ranks[..d].iter().min().unwrap())
}

/// Law-equivalent inversion form of the power-of-d choice: the target queue
/// length is `max{i >= 0 : u < (Q_i/N)^d}` (with `Q_0 = N`), so
/// `P(length >= i) = (Q_i/N)^d`. Avoids materializing `d` rank draws when
/// `d` is large; with-replacement semantics only.
pub fn decide_jsq_d_cdf(s: &OccupancyState, d: usize, u: f64) -> Level {
    debug_assert!((0.0..1.0).contains(&u));
    let n = f64::from(s.n());
    let mut level = 0;
    for i in 1..=s.b() {
        if u < (f64::from(s.level_count(i)) / n).powi(d as i32) {
            level = i;
        } else {
            break;
        }
    }
    level
}

/// Three-interval inversion layout for the two-level truncated system:
/// `[0, a1-a2)` targets a length-1 server, `[a1-a2, 1-a2)` an idle one, the
/// rest a full one, where `a_i = (Q_i/N)^d`. Same marginal law as
/// [`decide_jsq_d_cdf`]; the interval order is what the coupled two-level
/// comparison consumes.
pub fn decide_jsq_d_interval_b2(s: &OccupancyState, d: usize, u: f64) -> Level {
    assert_eq!(s.b(), 2, "interval layout is specific to b = 2");
    debug_assert!((0.0..1.0).contains(&u));
    let n = f64::from(s.n());
    let a1 = (f64::from(s.level_count(1)) / n).powi(d as i32);
    let a2 = (f64::from(s.level_count(2)) / n).powi(d as i32);
    if u < a1 - a2 {
        1
    } else if u < 1.0 - a2 {
        0
    } else {
        2
    }
}

/// Deliberately maximal sloppiness within a window: always the
/// `(n+1)`-th ordered server.
pub fn decide_mjsq(s: &OccupancyState, n: u32) -> ArrivalDecision {
    assert!(n + 1 <= s.n(), "window exceeds server count");
    ArrivalDecision::AssignRank(n + 1)
}

/// Uniform choice among the `n+1` lowest ordered servers: a representative
/// member of the sloppy-window class sandwiched between JSQ and the maximal
/// rule.
pub fn decide_cjsq_uniform(s: &OccupancyState, n: u32, u: f64) -> ArrivalDecision {
    assert!(n + 1 <= s.n(), "window exceeds server count");
    ArrivalDecision::AssignRank(uniform_rank_in_window(n, u))
}

/// Hybrid rule: take the power-of-d choice when it lands within the `n+1`
/// lowest ranks, otherwise a uniform rank inside the window.
pub fn decide_jsq_nd(
    s: &OccupancyState,
    n: u32,
    d: usize,
    ranks: &[u32],
    u: f64,
) -> ArrivalDecision {
    assert!(n + 1 <= s.n(), "window exceeds server count");
    assert!(d >= 1 && ranks.len() >= d, "need {d} rank draws, got {}", ranks.len());
    let r = *ranks[..d].iter().min().unwrap();
    if r <= n + 1 {
        ArrivalDecision::AssignRank(r)
    } else {
        ArrivalDecision::AssignRank(uniform_rank_in_window(n, u))
    }
}

fn uniform_rank_in_window(n: u32, u: f64) -> u32 {
    debug_assert!((0.0..=1.0).contains(&u));
    (u * f64::from(n + 1)).ceil().clamp(1.0, f64::from(n + 1)) as u32
}

/// Outcome of the admission-threshold rule: where the task went, whether the
/// preferred target class (a length-1 server) was available, or a refusal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PiCDecision {
    Assign { rank: u32, fallback: bool },
    Discard,
}

/// Admission-threshold rule on the two-level all-busy system: admit with
/// probability `(1 - c/N)^d` and send the task to the lowest length-1
/// server, else discard. When no length-1 server exists (never, in the
/// regime this rule is meant for) the lowest busy rank is used and flagged.
pub fn decide_pi_c(s: &OccupancyState, c: f64, d: usize, u: f64) -> PiCDecision {
    assert!(c >= 0.0 && c <= f64::from(s.n()), "c out of [0, N]");
    debug_assert!((0.0..1.0).contains(&u));
    let p_admit = (1.0 - c / f64::from(s.n())).powi(d as i32);
    if u >= p_admit {
        return PiCDecision::Discard;
    }
    let q1 = s.level_count(1);
    let q2 = s.level_count(2.min(s.b()));
    if q1 > q2 {
        // Lowest server with length exactly 1 sits just above the idle block.
        PiCDecision::Assign { rank: s.n() - q1 + 1, fallback: false }
    } else {
        let rank = if q1 > 0 { s.n() - q1 + 1 } else { 1 };
        PiCDecision::Assign { rank, fallback: true }
    }
}

/// Batch placement: the `ell` smallest of `d` distinct sampled ranks, in
/// increasing order. The caller applies all `ell` tasks against the queue
/// lengths recorded at the arrival instant.
pub fn decide_batch_jsq_d(ell: usize, ranks: &[u32]) -> Vec<u32> {
    assert!(ell >= 1 && ell <= ranks.len(), "batch size exceeds sample size");
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    debug_assert!(sorted.windows(2).all(|w| w[0] < w[1]), "ranks must be distinct");
    sorted.truncate(ell);
    sorted
}

/// A dispatching rule with all parameters resolved to concrete values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PolicySpec {
    #[serde(rename = "JSQ")]
    Jsq,
    #[serde(rename = "JSQ_D")]
    JsqD {
        d: usize,
        #[serde(default = "default_true")]
        with_replacement: bool,
    },
    #[serde(rename = "MJSQ")]
    Mjsq { n: u32 },
    #[serde(rename = "CJSQ_UNIFORM")]
    CjsqUniform { n: u32 },
    #[serde(rename = "JSQ_ND")]
    JsqNd { n: u32, d: usize },
    #[serde(rename = "PI_C")]
    PiC { c: f64, d: usize },
    #[serde(rename = "BATCH_JSQ_D")]
    BatchJsqD { ell: u32, d: usize },
}

fn default_true() -> bool {
    true
}

impl PolicySpec {
    /// Rank draws this policy consumes per arrival (0 when it decides from
    /// the auxiliary uniform alone).
    pub fn rank_draws_needed(&self) -> usize {
        match self {
            PolicySpec::Jsq | PolicySpec::Mjsq { .. } | PolicySpec::CjsqUniform { .. } => 0,
            PolicySpec::JsqD { d, .. } | PolicySpec::JsqNd { d, .. } => *d,
            PolicySpec::PiC { .. } => 0,
            PolicySpec::BatchJsqD { d, .. } => *d,
        }
    }

    /// Whether the rank draws must be distinct.
    pub fn wants_distinct_ranks(&self) -> bool {
        match self {
            PolicySpec::JsqD { with_replacement, .. } => !*with_replacement,
            PolicySpec::BatchJsqD { .. } => true,
            _ => false,
        }
    }

    /// Validate the parameters against a concrete system size.
    pub fn validate(&self, n_servers: u32) -> Result<(), String> {
        let check_window = |w: u32| {
            if w + 1 > n_servers {
                Err(format!("window n={w} needs n+1 <= N={n_servers}"))
            } else {
                Ok(())
            }
        };
        match self {
            PolicySpec::Jsq => Ok(()),
            PolicySpec::JsqD { d, with_replacement } => {
                if *d < 1 {
                    Err("d must be at least 1".into())
                } else if !*with_replacement && *d > n_servers as usize {
                    Err(format!("without replacement needs d <= N, got d={d}, N={n_servers}"))
                } else if *d > n_servers as usize {
                    Err(format!("d={d} exceeds N={n_servers}"))
                } else {
                    Ok(())
                }
            }
            PolicySpec::Mjsq { n } | PolicySpec::CjsqUniform { n } => check_window(*n),
            PolicySpec::JsqNd { n, d } => {
                check_window(*n)?;
                if *d < 1 || *d > n_servers as usize {
                    Err(format!("d={d} out of 1..=N={n_servers}"))
                } else {
                    Ok(())
                }
            }
            PolicySpec::PiC { c, d } => {
                if !(0.0..=f64::from(n_servers)).contains(c) {
                    Err(format!("c={c} out of [0, N={n_servers}]"))
                } else if *d < 1 {
                    Err("d must be at least 1".into())
                } else {
                    Ok(())
                }
            }
            PolicySpec::BatchJsqD { ell, d } => {
                if *ell < 1 {
                    Err("ell must be at least 1".into())
                } else if (*ell as usize) > *d {
                    Err(format!("batch needs d >= ell, got d={d}, ell={ell}"))
                } else if *d > n_servers as usize {
                    Err(format!("without replacement needs d <= N, got d={d}, N={n_servers}"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Column value for output tables.
    pub fn label(&self) -> String {
        match self {
            PolicySpec::Jsq => "JSQ".into(),
            PolicySpec::JsqD { d, with_replacement: true } => format!("JSQ_D(d={d})"),
            PolicySpec::JsqD { d, with_replacement: false } => format!("JSQ_D(d={d},norepl)"),
            PolicySpec::Mjsq { n } => format!("MJSQ(n={n})"),
            PolicySpec::CjsqUniform { n } => format!("CJSQ_UNIFORM(n={n})"),
            PolicySpec::JsqNd { n, d } => format!("JSQ_ND(n={n},d={d})"),
            PolicySpec::PiC { c, d } => format!("PI_C(c={c},d={d})"),
            PolicySpec::BatchJsqD { ell, d } => format!("BATCH_JSQ_D(ell={ell},d={d})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: u32, q: &[u32]) -> OccupancyState {
        OccupancyState::from_tail_counts(n, q, 0).unwrap()
    }

    #[test]
    fn jsq_takes_rank_one() {
        assert_eq!(decide_jsq(&state(4, &[4, 2, 1])), ArrivalDecision::AssignRank(1));
        assert_eq!(decide_jsq(&OccupancyState::empty(1, 1)), ArrivalDecision::AssignRank(1));
    }

    #[test]
    fn jsq_d_takes_the_minimum_sampled_rank() {
        let s = OccupancyState::empty(9, 2);
        assert_eq!(decide_jsq_d(&s, 3, &[7, 3, 9]), ArrivalDecision::AssignRank(3));
        let s = state(4, &[4, 2, 1]);
        let d = decide_jsq_d(&s, 2, &[4, 4]);
        assert_eq!(d, ArrivalDecision::AssignRank(4));
        assert_eq!(s.rank_queue_len(4), 3);
    }

    #[test]
    fn cdf_inversion_hand_examples() {
        let s = state(4, &[4, 2, 1]);
        assert_eq!(decide_jsq_d_cdf(&s, 2, 0.5), 1);
        assert_eq!(decide_jsq_d_cdf(&s, 2, 0.2), 2);
        let s2 = state(4, &[2, 1, 0]);
        // u at or above (Q_1/N)^d joins an idle server.
        assert_eq!(decide_jsq_d_cdf(&s2, 2, 0.25), 0);
        assert_eq!(decide_jsq_d_cdf(&s2, 2, 0.9), 0);
    }

    #[test]
    fn mjsq_takes_the_window_edge() {
        let s = OccupancyState::empty(10, 2);
        assert_eq!(decide_mjsq(&s, 0), ArrivalDecision::AssignRank(1));
        assert_eq!(decide_mjsq(&s, 3), ArrivalDecision::AssignRank(4));
        assert_eq!(decide_mjsq(&s, 9), ArrivalDecision::AssignRank(10));
    }

    #[test]
    fn cjsq_uniform_inverts_over_the_window() {
        let s = OccupancyState::empty(10, 2);
        assert_eq!(decide_cjsq_uniform(&s, 0, 0.7), ArrivalDecision::AssignRank(1));
        assert_eq!(decide_cjsq_uniform(&s, 4, 0.5), ArrivalDecision::AssignRank(3));
        assert_eq!(decide_cjsq_uniform(&s, 4, 1.0 - 1e-12), ArrivalDecision::AssignRank(5));
        assert_eq!(decide_cjsq_uniform(&s, 4, 0.0), ArrivalDecision::AssignRank(1));
    }

    #[test]
    fn jsq_nd_prefers_the_sampled_minimum_inside_the_window() {
        let s = OccupancyState::empty(20, 2);
        assert_eq!(decide_jsq_nd(&s, 5, 2, &[3, 9], 0.1), ArrivalDecision::AssignRank(3));
        assert_eq!(decide_jsq_nd(&s, 2, 2, &[7, 9], 0.9), ArrivalDecision::AssignRank(3));
        // Full-width window reproduces the plain power-of-d choice.
        for u in [0.0, 0.3, 0.99] {
            assert_eq!(decide_jsq_nd(&s, 19, 2, &[7, 9], u), decide_jsq_d(&s, 2, &[7, 9]));
        }
    }

    #[test]
    fn pi_c_threshold_examples() {
        let s = OccupancyState::all_busy(100, 2);
        for u in [0.0, 0.5, 1.0 - 1e-12] {
            assert!(matches!(decide_pi_c(&s, 0.0, 3, u), PiCDecision::Assign { .. }));
            assert_eq!(decide_pi_c(&s, 100.0, 3, u), PiCDecision::Discard);
        }
        // (1 - 10/100)^2 = 0.81.
        assert_eq!(
            decide_pi_c(&s, 10.0, 2, 0.80),
            PiCDecision::Assign { rank: 1, fallback: false }
        );
        assert_eq!(decide_pi_c(&s, 10.0, 2, 0.82), PiCDecision::Discard);
    }

    #[test]
    fn pi_c_falls_back_when_no_length_one_server_exists() {
        let s = OccupancyState::from_tail_counts(4, &[4, 4], 0).unwrap();
        assert_eq!(decide_pi_c(&s, 0.0, 1, 0.5), PiCDecision::Assign { rank: 1, fallback: true });
    }

    #[test]
    fn batch_choice_takes_the_smallest_ranks_sorted() {
        assert_eq!(decide_batch_jsq_d(2, &[9, 2, 5, 7]), vec![2, 5]);
        assert_eq!(decide_batch_jsq_d(1, &[9, 2, 5, 7]), vec![2]);
        assert_eq!(decide_batch_jsq_d(4, &[4, 2, 3, 1]), vec![1, 2, 3, 4]);
    }

    #[test]
    fn spec_validation_catches_bad_parameters() {
        assert!(PolicySpec::JsqD { d: 5, with_replacement: true }.validate(4).is_err());
        assert!(PolicySpec::JsqD { d: 4, with_replacement: false }.validate(4).is_ok());
        assert!(PolicySpec::Mjsq { n: 4 }.validate(4).is_err());
        assert!(PolicySpec::Mjsq { n: 3 }.validate(4).is_ok());
        assert!(PolicySpec::BatchJsqD { ell: 5, d: 4 }.validate(10).is_err());
        assert!(PolicySpec::PiC { c: 11.0, d: 2 }.validate(10).is_err());
    }

    #[test]
    fn spec_round_trips_through_json_with_spec_kind_names() {
        let js = r#"{"kind":"JSQ_ND","n":10,"d":20}"#;
        let spec: PolicySpec = serde_json::from_str(js).unwrap();
        assert_eq!(spec, PolicySpec::JsqNd { n: 10, d: 20 });
        let js = r#"{"kind":"JSQ_D","d":3}"#;
        let spec: PolicySpec = serde_json::from_str(js).unwrap();
        assert_eq!(spec, PolicySpec::JsqD { d: 3, with_replacement: true });
        assert!(serde_json::from_str::<PolicySpec>(r#"{"kind":"bogus"}"#).is_err());
    }
}
