//! Tracking and estimation metrics of a mission.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::log::MissionLog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Position mean squared error per axis, m².
    pub mse: [f64; 3],
    /// Mean of the solver-reported horizon costs.
    pub avg_cost: f64,
    /// Mean squared `Δ` prediction error per axis after the wind switch.
    pub delta_error_axes: Option<[f64; 3]>,
    /// Sum of `delta_error_axes`.
    pub delta_error: Option<f64>,
    pub samples: usize,
}

pub fn compute_metrics(log: &MissionLog) -> Result<Metrics> {
    if log.rows.is_empty() {
        return Err(HarnessError::Config("cannot compute metrics of an empty log".into()));
    }
    let n = log.rows.len() as f64;
    let mut mse = [0.0; 3];
    let mut cost = 0.0;
    let mut derr = [0.0; 3];
    let mut post = 0usize;
    for r in &log.rows {
        for i in 0..3 {
            let e = r.state[i] - r.reference[i];
            mse[i] += e * e;
        }
        cost += r.horizon_cost;
        if r.t >= log.switch_time {
            post += 1;
            for i in 0..3 {
                let e = r.delta_mean[i] - r.delta_true[i];
                derr[i] += e * e;
            }
        }
    }
    let axes = (post > 0).then(|| derr.map(|v| v / post as f64));
    Ok(Metrics {
        mse: mse.map(|v| v / n),
        avg_cost: cost / n,
        delta_error_axes: axes,
        delta_error: axes.map(|a| a.iter().sum()),
        samples: log.rows.len(),
    })
}

/// Element-wise mean of several runs' metrics.
pub fn average(items: &[Metrics]) -> Option<Metrics> {
    if items.is_empty() {
        return None;
    }
    let k = items.len() as f64;
    let mean3 = |f: &dyn Fn(&Metrics) -> [f64; 3]| {
        let mut out = [0.0; 3];
        for m in items {
            let v = f(m);
            for i in 0..3 {
                out[i] += v[i] / k;
            }
        }
        out
    };
    let axes = items
        .iter()
        .all(|m| m.delta_error_axes.is_some())
        .then(|| mean3(&|m| m.delta_error_axes.unwrap()));
    Some(Metrics {
        mse: mean3(&|m| m.mse),
        avg_cost: items.iter().map(|m| m.avg_cost).sum::<f64>() / k,
        delta_error_axes: axes,
        delta_error: axes.map(|a| a.iter().sum()),
        samples: items.iter().map(|m| m.samples).sum::<usize>() / items.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::{LogRow, SolverRecord};

    fn row(t: f64, p: [f64; 3], r: [f64; 3], cost: f64, mu: [f64; 3], d: [f64; 3]) -> LogRow {
        let mut state = [0.0; 12];
        state[..3].copy_from_slice(&p);
        let mut reference = [0.0; 6];
        reference[..3].copy_from_slice(&r);
        LogRow {
            t,
            state,
            command: [0.0; 3],
            thrust: 0.0,
            attitude_ref: [0.0; 2],
            torque: [0.0; 3],
            reference,
            delta_mean: mu,
            delta_var: [0.0; 3],
            delta_true: d,
            stage_cost: 0.0,
            horizon_cost: cost,
            solver: SolverRecord::default(),
        }
    }

    fn log(rows: Vec<LogRow>) -> MissionLog {
        MissionLog {
            switch_time: 1.0,
            ts: 0.5,
            rows,
            ..Default::default()
        }
    }

    #[test]
    fn constant_error_in_x() {
        let l = log((0..6).map(|k| row(k as f64 * 0.5, [1.3, 2.0, 3.0], [1.0, 2.0, 3.0], 0.0, [0.0; 3], [0.0; 3])).collect());
        let m = compute_metrics(&l).unwrap();
        assert!((m.mse[0] - 0.09).abs() < 1e-12);
        assert_eq!(m.mse[1], 0.0);
        assert_eq!(m.mse[2], 0.0);
    }

    #[test]
    fn perfect_tracking_is_zero() {
        let l = log(vec![row(0.0, [1.0; 3], [1.0; 3], 0.0, [0.0; 3], [0.0; 3])]);
        assert_eq!(compute_metrics(&l).unwrap().mse, [0.0; 3]);
    }

    #[test]
    fn hand_computed_example() {
        let l = log(vec![
            row(0.0, [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], 2.0, [5.0, 0.0, 0.0], [0.0; 3]),
            row(0.5, [0.0, 2.0, 0.0], [0.0, 0.0, 1.0], 4.0, [0.0; 3], [0.0; 3]),
            row(1.0, [0.0, 0.0, 0.0], [3.0, 0.0, 0.0], 6.0, [1.0, 1.0, 0.0], [0.0, 0.0, 2.0]),
            row(1.5, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.0, [0.0, 3.0, 0.0], [0.0, 0.0, 0.0]),
        ]);
        let m = compute_metrics(&l).unwrap();
        assert_eq!(m.mse, [(1.0 + 9.0) / 4.0, 4.0 / 4.0, 1.0 / 4.0]);
        assert_eq!(m.avg_cost, 3.0);
        assert_eq!(m.delta_error_axes, Some([0.5, 5.0, 2.0]));
        assert_eq!(m.delta_error, Some(7.5));
    }

    #[test]
    fn empty_log_is_an_error() {
        assert!(compute_metrics(&log(vec![])).is_err());
    }
}
