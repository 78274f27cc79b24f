//! CSV outputs. All floats are written with 17 significant digits so a
//! fixed (config, seed) pair reproduces byte-identical files and values
//! round-trip exactly through text.

use crate::fluid::FluidSolution;
use crate::sim::Trajectory;
use std::path::Path;

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub experiment: String,
    pub n: u32,
    pub policy: String,
    pub metric: String,
    pub value: f64,
    pub pass: bool,
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["experiment", "N", "policy", "metric", "value", "pass"])?;
    for r in rows {
        w.write_record([
            r.experiment.as_str(),
            &r.n.to_string(),
            r.policy.as_str(),
            r.metric.as_str(),
            &fmt_float(r.value),
            if r.pass { "true" } else { "false" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One trajectory CSV row; levels are fluid-scaled (tail counts / N, loss
/// count / N) so files are comparable across system sizes.
#[derive(Clone, Debug)]
pub struct FluidRow {
    pub rep_id: u64,
    pub policy: String,
    pub t: f64,
    pub levels: Vec<f64>,
    pub loss: f64,
}

pub fn write_fluid_rows(path: &Path, b: usize, rows: &[FluidRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["rep_id".to_string(), "policy".to_string(), "t".to_string()];
    header.extend((1..=b).map(|i| format!("level_{i}")));
    header.push("loss".to_string());
    w.write_record(&header)?;
    for r in rows {
        assert_eq!(r.levels.len(), b, "row width must match the declared buffer");
        let mut rec = vec![r.rep_id.to_string(), r.policy.clone(), fmt_float(r.t)];
        rec.extend(r.levels.iter().map(|&v| fmt_float(v)));
        rec.push(fmt_float(r.loss));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn trajectory_rows(rep_id: u64, traj: &Trajectory) -> Vec<FluidRow> {
    let n = f64::from(traj.n);
    traj.snapshots
        .iter()
        .map(|s| FluidRow {
            rep_id,
            policy: traj.label.clone(),
            t: s.t,
            levels: s.state.levels().iter().map(|&q| f64::from(q) / n).collect(),
            loss: s.state.loss() as f64 / n,
        })
        .collect()
}

pub fn write_trajectories(path: &Path, items: &[(u64, &Trajectory)]) -> Result<(), csv::Error> {
    let b = items.first().map_or(0, |(_, t)| t.b);
    let mut rows = Vec::new();
    for (rep, traj) in items {
        assert_eq!(traj.b, b, "mixed buffer sizes in one trajectory file");
        rows.extend(trajectory_rows(*rep, traj));
    }
    write_fluid_rows(path, b, &rows)
}

/// Sample the ODE solution on the reporting grid and emit it in the same
/// schema as simulated trajectories (rep_id 0, zero loss).
pub fn fluid_solution_rows(
    label: &str,
    sol: &FluidSolution,
    snapshot_dt: f64,
) -> Vec<FluidRow> {
    let points = (sol.t_max() / snapshot_dt + 1e-9).floor() as usize + 1;
    (0..points)
        .map(|i| {
            let t = i as f64 * snapshot_dt;
            FluidRow {
                rep_id: 0,
                policy: label.to_string(),
                t,
                levels: sol.at(t).q.clone(),
                loss: 0.0,
            }
        })
        .collect()
}

pub fn write_samples(
    path: &Path,
    entries: &[(u64, String, f64)],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rep_id", "coordinate", "value"])?;
    for (rep, coord, value) in entries {
        w.write_record([rep.to_string().as_str(), coord.as_str(), &fmt_float(*value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Filename-safe form of a policy label: lowercase alphanumerics with
/// single dashes, e.g. "JSQ_D(d=26)" -> "jsq_d-d-26".
pub fn sanitize_label(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    let mut dash_pending = false;
    for c in label.chars() {
        if c.is_ascii_alphanumeric() || c == '_' {
            if dash_pending && !out.is_empty() {
                out.push('-');
            }
            dash_pending = false;
            out.push(c.to_ascii_lowercase());
        } else {
            dash_pending = true;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips_exactly() {
        for &x in &[0.0, 1.0, -1.5, 0.1, 2.0 / 3.0, 1e-300, 1.7976931348623157e308] {
            let s = fmt_float(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "round-trip failed for {s}");
        }
    }

    #[test]
    fn labels_sanitize_to_filename_safe_slugs() {
        assert_eq!(sanitize_label("JSQ"), "jsq");
        assert_eq!(sanitize_label("JSQ_D(d=26)"), "jsq_d-d-26");
        assert_eq!(sanitize_label("BATCH_JSQ_D(ell=8,d=32)"), "batch_jsq_d-ell-8-d-32");
        assert_eq!(sanitize_label("PI_C(c=10,d=2)"), "pi_c-c-10-d-2");
    }

    #[test]
    fn summary_files_are_reproducible_and_quoted() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            SummaryRow {
                experiment: "x".into(),
                n: 100,
                policy: "BATCH_JSQ_D(ell=8,d=32)".into(),
                metric: "sup_l1".into(),
                value: 1.0 / 3.0,
                pass: true,
            },
            SummaryRow {
                experiment: "x".into(),
                n: 100,
                policy: "JSQ".into(),
                metric: "ks".into(),
                value: 0.25,
                pass: false,
            },
        ];
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        write_summary(&p1, &rows).unwrap();
        write_summary(&p2, &rows).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());
        let text = String::from_utf8(b1).unwrap();
        // The comma inside the policy label must be quoted away.
        assert!(text.contains("\"BATCH_JSQ_D(ell=8,d=32)\""));
        assert!(text.lines().next().unwrap().starts_with("experiment,N,policy,metric"));
        let reparsed: Vec<csv::StringRecord> = csv::Reader::from_path(&p1)
            .unwrap()
            .records()
            .map(|r| r.unwrap())
            .collect();
        assert_eq!(reparsed.len(), 2);
        assert_eq!(reparsed[0].get(4).unwrap().parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn trajectory_rows_are_fluid_scaled() {
        use crate::occupancy::OccupancyState;
        use crate::sim::{Snapshot, Trajectory};
        let mut s = OccupancyState::from_tail_counts(50, &[40, 10, 0], 0).unwrap();
        s.record_discard();
        let traj = Trajectory {
            label: "JSQ".into(),
            n: 50,
            b: 3,
            snapshots: vec![Snapshot { t: 0.5, state: s.clone() }],
            terminal: s,
            max_level: vec![40, 10, 0],
            null_departures: 0,
            pi_fallbacks: 0,
        };
        let rows = trajectory_rows(3, &traj);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].levels, vec![0.8, 0.2, 0.0]);
        assert_eq!(rows[0].loss, 1.0 / 50.0);
        assert_eq!(rows[0].rep_id, 3);
    }
}
