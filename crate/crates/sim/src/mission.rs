//! Closed-loop flights: the MPC outer loop on the translational model, the
//! attitude PD inner loop, sensing, disturbance identification and the
//! estimator updates of each controller variant.

use dgp_core::data::Dataset;
use dgp_core::gp_dual::DualGp;
use dgp_core::gp_online::OnlineSparseGp;
use dgp_core::gp_sparse::SparseGp;
use dgp_core::mpc::{gp_input, solve_mpc, DisturbanceModel, HorizonReference, MpcConfig, ZeroDisturbance};
use dgp_core::quad::{
    attitude_from_acceleration, pd_attitude, rotation_matrix, step, translational_model, true_delta, ControlInput, LinearModel, PdGains,
    QuadParams, QuadState, WindModel,
};
use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ExperimentConfig, PlantKind};
use crate::error::{HarnessError, Result};
use crate::log::{LogRow, MissionLog, SolverRecord};
use crate::reference::Reference;

/// Translational state `(p, v)`, command `a` and disturbance `Δ` sizes.
pub const X_DIM: usize = 6;
pub const U_DIM: usize = 3;
pub const D_DIM: usize = 3;
/// GP input `(p, v, a)`.
pub const GP_INPUT_DIM: usize = X_DIM + U_DIM;

/// Disturbance estimator behind each controller variant.
#[derive(Clone, Debug)]
pub enum Estimator {
    Nominal(ZeroDisturbance),
    Baseline(SparseGp<f64>),
    Online(OnlineSparseGp<f64>),
    Dual(DualGp<f64>),
}

impl Estimator {
    pub fn nominal() -> Self {
        Estimator::Nominal(ZeroDisturbance {
            input_dim: GP_INPUT_DIM,
            output_dim: D_DIM,
        })
    }

    pub fn model(&self) -> &dyn DisturbanceModel<f64> {
        match self {
            Estimator::Nominal(z) => z,
            Estimator::Baseline(g) => g,
            Estimator::Online(g) => g,
            Estimator::Dual(g) => g,
        }
    }

    /// Feeds one identified `(x̃, Δ)` pair to the estimator.
    pub fn observe(&mut self, x: &[f64], delta: &[f64]) -> Result<()> {
        match self {
            Estimator::Nominal(_) | Estimator::Baseline(_) => {}
            Estimator::Online(g) => {
                g.update(x, delta)?;
            }
            Estimator::Dual(g) => {
                g.online_update(x, delta)?;
            }
        }
        Ok(())
    }
}

/// What was sent to the vehicle over one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Applied {
    pub thrust: f64,
    pub attitude_ref: [f64; 2],
    pub torque: [f64; 3],
    /// Mean acceleration from thrust and gravity over the sample.
    pub accel: [f64; 3],
    /// The same mean over the first and the second half of the sample.
    pub accel_halves: [[f64; 3]; 2],
}

/// Simulated vehicle. The linear plant is the prediction model with `Δ = 0`.
#[derive(Clone, Debug)]
pub struct Plant {
    kind: PlantKind,
    params: QuadParams<f64>,
    gains: PdGains<f64>,
    wind: WindModel<f64>,
    model: LinearModel<f64>,
    quad: QuadState<f64>,
    dt: f64,
    substeps: usize,
}

impl Plant {
    pub fn new(cfg: &ExperimentConfig, wind: WindModel<f64>, p0: Vector3<f64>, v0: Vector3<f64>) -> Result<Self> {
        let params = cfg.quad.params();
        let model = translational_model(&params, cfg.mission.ts)?;
        let mut quad = QuadState::at_rest(p0);
        quad.v = v0;
        Ok(Self {
            kind: cfg.mission.plant,
            params,
            gains: cfg.pd.gains(),
            wind,
            model,
            quad,
            dt: cfg.mission.dt,
            substeps: cfg.mission.substeps(),
        })
    }

    pub fn state(&self) -> &QuadState<f64> {
        &self.quad
    }

    pub fn translational(&self) -> DVector<f64> {
        self.quad.translational()
    }

    fn thrust_accel(&self, thrust: f64) -> Vector3<f64> {
        let body_z = rotation_matrix(&self.quad.zeta) * Vector3::z();
        Vector3::z() * self.params.gravity - body_z * (thrust / self.params.mass)
    }

    /// Holds the acceleration command for `substeps` integrator steps starting
    /// at `t`. `halfway` receives the translational state after half of them.
    pub fn advance(&mut self, accel: &Vector3<f64>, t: f64, halfway: &mut Option<DVector<f64>>) -> Result<Applied> {
        let (thrust, zeta_ref) = attitude_from_acceleration(accel, &self.params);
        let mut torque_sum = Vector3::zeros();
        let mut accel_sum = Vector3::zeros();
        let mut first_half = Vector3::zeros();
        match self.kind {
            PlantKind::Linear => {
                let half_model = translational_model(&self.params, self.model.ts / 2.0)?;
                let u = DVector::from_column_slice(accel.as_slice());
                let zero = DVector::zeros(D_DIM);
                let mid = half_model.step(&self.translational(), &u, &zero);
                *halfway = Some(mid.clone());
                let next = half_model.step(&mid, &u, &zero);
                self.quad.p = Vector3::new(next[0], next[1], next[2]);
                self.quad.v = Vector3::new(next[3], next[4], next[5]);
                accel_sum = *accel * self.substeps as f64;
                first_half = accel_sum / 2.0;
            }
            PlantKind::Quadcopter => {
                let mut tt = t;
                for k in 0..self.substeps {
                    let tau = pd_attitude(&self.quad.zeta, &self.quad.omega, &zeta_ref, &self.gains, self.params.torque_max);
                    let u = ControlInput::new(thrust, tau).saturate(&self.params);
                    torque_sum += u.torque;
                    let before = self.thrust_accel(u.thrust);
                    self.quad = step(&self.quad, &u, &self.wind, tt, &self.params, self.dt)?;
                    accel_sum += (before + self.thrust_accel(u.thrust)) * 0.5;
                    tt = t + (k + 1) as f64 * self.dt;
                    if 2 * (k + 1) == self.substeps {
                        *halfway = Some(self.translational());
                        first_half = accel_sum;
                    }
                }
            }
        }
        let n = self.substeps.max(1) as f64;
        let half = n / 2.0;
        Ok(Applied {
            thrust,
            attitude_ref: [zeta_ref[0], zeta_ref[1]],
            torque: (torque_sum / n).into(),
            accel: (accel_sum / n).into(),
            accel_halves: [(first_half / half).into(), ((accel_sum - first_half) / half).into()],
        })
    }
}

/// Additive Gaussian noise on measured `(p, v)`.
pub struct Sensor {
    rng: ChaCha8Rng,
    position_std: f64,
    velocity_std: f64,
}

impl Sensor {
    pub fn new(cfg: &ExperimentConfig, stream: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(mix(cfg.seed, stream)),
            position_std: cfg.sensor.position_std,
            velocity_std: cfg.sensor.velocity_std,
        }
    }

    pub fn measure(&mut self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        for i in 0..X_DIM {
            let std = if i < 3 { self.position_std } else { self.velocity_std };
            let z: f64 = self.rng.sample(StandardNormal);
            out[i] += std * z;
        }
        out
    }
}

/// SplitMix64-style seed mixing so every stream gets an unrelated generator.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything that distinguishes one flight from another.
pub struct FlightSpec<'a> {
    pub reference: &'a dyn Reference,
    pub wind: WindModel<f64>,
    /// Number of controller samples.
    pub steps: usize,
    /// Uniform dither on the commanded acceleration (training excitation).
    pub dither: f64,
    /// Sensor-noise and dither stream.
    pub stream: u64,
    /// Also identify `Δ` on windows shifted by half a sample.
    pub half_samples: bool,
    pub variant: String,
    pub iteration: usize,
}

pub struct Flight {
    pub log: MissionLog,
    /// `(x̃, Δ)` pairs on the controller grid, in time order.
    pub data: Dataset<f64>,
    /// Aligned and half-shifted pairs interleaved, when requested.
    pub dense: Option<Dataset<f64>>,
}

fn refs_at(reference: &dyn Reference, t: f64, ts: f64, horizon: usize, feedforward: bool) -> HorizonReference<f64> {
    let states = (0..=horizon)
        .map(|i| DVector::from_column_slice(&reference.at(t + i as f64 * ts).state()))
        .collect();
    let inputs = (0..horizon)
        .map(|i| {
            if feedforward {
                DVector::from_column_slice(&reference.at(t + i as f64 * ts).a)
            } else {
                DVector::zeros(U_DIM)
            }
        })
        .collect();
    HorizonReference { states, inputs }
}

/// Shifts the input reference by the predicted disturbance acceleration at
/// the reference points.
fn compensate(refs: &mut HorizonReference<f64>, gp: &dyn DisturbanceModel<f64>, mass: f64) -> Result<()> {
    for (x, u) in refs.states.iter().zip(refs.inputs.iter_mut()) {
        let (mu, _) = gp.predict(&gp_input(x, u))?;
        *u -= mu / mass;
    }
    Ok(())
}

fn stage_cost(mpc: &MpcConfig<f64>, x: &DVector<f64>, r: &DVector<f64>, u: &DVector<f64>, uref: &DVector<f64>) -> f64 {
    let e = x - r;
    let du = u - uref;
    (e.transpose() * &mpc.q * &e)[(0, 0)] + (du.transpose() * &mpc.r * &du)[(0, 0)]
}

fn arr<const N: usize>(v: &DVector<f64>) -> [f64; N] {
    std::array::from_fn(|i| v[i])
}

/// Flies one mission and updates `estimator` online as samples arrive.
pub fn fly(cfg: &ExperimentConfig, estimator: &mut Estimator, spec: &FlightSpec<'_>) -> Result<Flight> {
    let ts = cfg.mission.ts;
    let mpc = cfg.controller.mpc(&cfg.quad);
    let params = cfg.quad.params();
    let model = translational_model(&params, ts)?;
    let r0 = spec.reference.at(0.0);
    let mut plant = Plant::new(cfg, spec.wind.clone(), Vector3::from(r0.p), Vector3::from(r0.v))?;
    let mut sensor = Sensor::new(cfg, spec.stream);
    let mut dither_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, spec.stream ^ 0xd17e));
    let mut log = MissionLog {
        variant: spec.variant.clone(),
        iteration: spec.iteration,
        seed: cfg.seed,
        ts,
        switch_time: spec.wind.switch_time,
        rows: Vec::with_capacity(spec.steps),
    };
    let mut data = Dataset::empty(GP_INPUT_DIM, D_DIM);
    let mut dense = spec.half_samples.then(|| Dataset::empty(GP_INPUT_DIM, D_DIM));
    let mut warm: Option<Vec<DVector<f64>>> = None;
    let mut x = sensor.measure(&plant.translational());
    // previous half-sample start: (measured mid state, command, second-half label input)
    let mut prev_mid: Option<(DVector<f64>, DVector<f64>, DVector<f64>)> = None;
    let diverged = |log: &MissionLog, t: f64, reason: String| HarnessError::Diverged {
        time: t,
        reason,
        partial: Box::new(log.clone()),
    };
    for k in 0..spec.steps {
        let t = k as f64 * ts;
        let full_state: [f64; 12] = plant.state().to_vector().into();
        let mut refs = refs_at(spec.reference, t, ts, mpc.horizon, cfg.controller.feedforward);
        let u_ref = refs.inputs[0].clone();
        if cfg.controller.disturbance_feedforward {
            compensate(&mut refs, estimator.model(), params.mass)?;
        }
        let sol = match solve_mpc(&mpc, &model, estimator.model(), &x, &refs, warm.as_deref()) {
            Ok(s) => s,
            Err(e) => return Err(diverged(&log, t, e.to_string())),
        };
        let mut u = sol.u0.clone();
        if spec.dither > 0.0 {
            for i in 0..U_DIM {
                let d: f64 = dither_rng.random_range(-spec.dither..=spec.dither);
                u[i] = (u[i] + d).clamp(mpc.u_min[i], mpc.u_max[i]);
            }
        }
        let xt = gp_input(&x, &u);
        let (mu, var) = estimator.model().predict(&xt)?;
        let mut halfway = None;
        let applied = match plant.advance(&Vector3::new(u[0], u[1], u[2]), t, &mut halfway) {
            Ok(a) => a,
            Err(e) => return Err(diverged(&log, t, e.to_string())),
        };
        let x_next = sensor.measure(&plant.translational());
        let u_label = if cfg.mission.label_with_applied {
            DVector::from_column_slice(&applied.accel)
        } else {
            u.clone()
        };
        let delta = true_delta(&x, &u_label, &x_next, &model)?;
        let row = LogRow {
            t,
            state: full_state,
            command: arr(&u),
            thrust: applied.thrust,
            attitude_ref: applied.attitude_ref,
            torque: applied.torque,
            reference: arr(&refs.states[0]),
            delta_mean: arr(&mu),
            delta_var: arr(&var),
            delta_true: arr(&delta),
            stage_cost: stage_cost(&mpc, &x, &refs.states[0], &u, &u_ref),
            horizon_cost: sol.diagnostics.expected_cost,
            solver: SolverRecord {
                outer_iterations: sol.diagnostics.outer_iterations,
                inner_iterations: sol.diagnostics.inner_iterations,
                max_violation: sol.diagnostics.max_violation,
                infeasible: sol.diagnostics.infeasible,
                converged: sol.diagnostics.converged,
            },
        };
        log.rows.push(row);
        if let Some(dense) = dense.as_mut() {
            let mid_now = sensor_mid(&mut sensor, &halfway)?;
            let halves = if cfg.mission.label_with_applied {
                applied.accel_halves.map(|a| DVector::from_column_slice(&a))
            } else {
                [u.clone(), u.clone()]
            };
            if let Some((mid, u_prev, label_prev)) = prev_mid.take() {
                // window [t - Ts/2, t + Ts/2], half under each command
                let u_avg = (&u_prev + &u) * 0.5;
                let label_avg = (&label_prev + &halves[0]) * 0.5;
                let d = true_delta(&mid, &label_avg, &mid_now, &model)?;
                dense.push(&gp_input(&mid, &u_avg), d.as_slice())?;
            }
            dense.push(&xt, delta.as_slice())?;
            let [_, second] = halves;
            prev_mid = Some((mid_now, u.clone(), second));
        }
        data.push(&xt, delta.as_slice())?;
        estimator.observe(&xt, delta.as_slice())?;
        let p = plant.state().p;
        if !plant.state().is_finite() || p.norm() > cfg.mission.divergence_radius {
            return Err(diverged(&log, t + ts, format!("position {:.2} m from the origin", p.norm())));
        }
        let mut shifted: Vec<DVector<f64>> = sol.useq[1..].to_vec();
        shifted.push(sol.useq[sol.useq.len() - 1].clone());
        warm = Some(shifted);
        x = x_next;
    }
    Ok(Flight { log, data, dense })
}

fn sensor_mid(sensor: &mut Sensor, halfway: &Option<DVector<f64>>) -> Result<DVector<f64>> {
    match halfway {
        Some(m) => Ok(sensor.measure(m)),
        None => Err(HarnessError::Config("half samples need an even number of integrator steps per sample".into())),
    }
}

