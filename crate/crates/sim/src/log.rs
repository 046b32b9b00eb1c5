//! Mission logs and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverRecord {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub max_violation: f64,
    pub infeasible: bool,
    pub converged: bool,
}

/// One controller sample. The state and reference are taken at `t`, before
/// the command is applied; `delta_true` is identified over `[t, t + Ts]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    /// `p, v, ζ, ω` of the simulated vehicle.
    pub state: [f64; 12],
    /// Commanded acceleration.
    pub command: [f64; 3],
    pub thrust: f64,
    /// Roll and pitch references handed to the attitude loop.
    pub attitude_ref: [f64; 2],
    /// Applied torque averaged over the sample.
    pub torque: [f64; 3],
    /// Position and velocity reference.
    pub reference: [f64; 6],
    pub delta_mean: [f64; 3],
    pub delta_var: [f64; 3],
    pub delta_true: [f64; 3],
    pub stage_cost: f64,
    /// Expected horizon cost reported by the solver.
    pub horizon_cost: f64,
    pub solver: SolverRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MissionLog {
    pub variant: String,
    pub iteration: usize,
    pub seed: u64,
    pub ts: f64,
    pub switch_time: f64,
    pub rows: Vec<LogRow>,
}

pub const CSV_HEADER: [&str; 41] = [
    "t", "px", "py", "pz", "vx", "vy", "vz", "roll", "pitch", "yaw", "wx", "wy", "wz", "ax_cmd", "ay_cmd", "az_cmd",
    "thrust", "roll_ref", "pitch_ref", "tau_x", "tau_y", "tau_z", "px_ref", "py_ref", "pz_ref", "vx_ref", "vy_ref",
    "vz_ref", "mu_dx", "mu_dy", "mu_dz", "var_dx", "var_dy", "var_dz", "dx", "dy", "dz", "stage_cost",
    "horizon_cost", "outer_iters", "inner_iters",
];

const CSV_TAIL: [&str; 3] = ["max_violation", "infeasible", "converged"];

impl MissionLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER.iter().chain(CSV_TAIL.iter()))?;
        for r in &self.rows {
            let mut rec: Vec<String> = Vec::with_capacity(44);
            rec.push(r.t.to_string());
            let floats = r
                .state
                .iter()
                .chain(&r.command)
                .chain(std::iter::once(&r.thrust))
                .chain(&r.attitude_ref)
                .chain(&r.torque)
                .chain(&r.reference)
                .chain(&r.delta_mean)
                .chain(&r.delta_var)
                .chain(&r.delta_true)
                .chain([&r.stage_cost, &r.horizon_cost]);
            rec.extend(floats.map(|v| v.to_string()));
            rec.push(r.solver.outer_iterations.to_string());
            rec.push(r.solver.inner_iterations.to_string());
            rec.push(r.solver.max_violation.to_string());
            rec.push(u8::from(r.solver.infeasible).to_string());
            rec.push(u8::from(r.solver.converged).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}
