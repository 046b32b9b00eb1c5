//! Experiment configuration, read from TOML. Every field has a default, so an
//! empty file (or no file) gives the standard setup.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use dgp_core::gp_sparse::SparseTrainConfig;
use dgp_core::mpc::{box_constraints, MpcConfig};
use dgp_core::quad::{PdGains, QuadParams, WindModel};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::mission::GP_INPUT_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Offline-trained sparse GP, never updated.
    BaselineGp,
    /// One sparse GP updated recursively with forgetting.
    OnlineGp,
    /// Frozen long-term GP plus recursively updated short-term GP.
    Dgp,
    /// Linear MPC without a disturbance model.
    Nominal,
}

impl Variant {
    pub const COMPARED: [Variant; 3] = [Variant::BaselineGp, Variant::OnlineGp, Variant::Dgp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineGp => "baseline-gp",
            Variant::OnlineGp => "online-gp",
            Variant::Dgp => "dgp",
            Variant::Nominal => "nominal",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline-gp" => Ok(Variant::BaselineGp),
            "online-gp" => Ok(Variant::OnlineGp),
            "dgp" => Ok(Variant::Dgp),
            "nominal" => Ok(Variant::Nominal),
            other => Err(format!("unknown variant '{other}' (expected baseline-gp, online-gp, dgp or nominal)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    /// Full rigid-body simulation with the attitude PD loop.
    Quadcopter,
    /// The translational prediction model itself, with no disturbance.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadConfig {
    pub mass: f64,
    /// Diagonal of the inertia matrix.
    pub inertia: [f64; 3],
    pub gravity: f64,
    pub thrust_max: f64,
    pub torque_max: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        let p = QuadParams::<f64>::default();
        Self {
            mass: p.mass,
            inertia: [p.inertia[(0, 0)], p.inertia[(1, 1)], p.inertia[(2, 2)]],
            gravity: p.gravity,
            thrust_max: p.thrust_max,
            torque_max: p.torque_max,
        }
    }
}

impl QuadConfig {
    pub fn params(&self) -> QuadParams<f64> {
        QuadParams {
            mass: self.mass,
            inertia: Matrix3::from_diagonal(&Vector3::from(self.inertia)),
            gravity: self.gravity,
            thrust_max: self.thrust_max,
            torque_max: self.torque_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindConfig {
    pub enabled: bool,
    pub constant: [f64; 3],
    pub amplitude: [f64; 3],
    /// rad/s
    pub frequency: f64,
    pub switch_time: f64,
    /// N·s/m
    pub drag_coefficient: f64,
    pub body_weights: [f64; 3],
    /// Lever arm turning the wind force into a torque, m.
    pub torque_arm: f64,
}

impl Default for WindConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            constant: [1.0, 3.0, -2.0],
            amplitude: [-2.0, -3.0, 3.0],
            frequency: PI / 10.0,
            switch_time: 10.0,
            drag_coefficient: 0.25,
            body_weights: [1.0, 1.0, 1.5],
            torque_arm: 0.05,
        }
    }
}

impl WindConfig {
    pub fn model(&self) -> WindModel<f64> {
        if !self.enabled {
            return WindModel::none();
        }
        WindModel {
            constant: Vector3::from(self.constant),
            amplitude: Vector3::from(self.amplitude),
            frequency: self.frequency,
            switch_time: self.switch_time,
            drag_coefficient: self.drag_coefficient,
            body_weights: Vector3::from(self.body_weights),
            torque_arm: self.torque_arm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdConfig {
    pub kp: [f64; 3],
    pub kd: [f64; 3],
}

impl Default for PdConfig {
    fn default() -> Self {
        let g = PdGains::<f64>::default();
        Self {
            kp: g.kp.into(),
            kd: g.kd.into(),
        }
    }
}

impl PdConfig {
    pub fn gains(&self) -> PdGains<f64> {
        PdGains {
            kp: Vector3::from(self.kp),
            kd: Vector3::from(self.kd),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionConfig {
    /// s
    pub duration: f64,
    /// Controller sampling time, s.
    pub ts: f64,
    /// Integrator and attitude-loop step, s.
    pub dt: f64,
    pub plant: PlantKind,
    /// Missions abort once the position leaves this radius, m.
    pub divergence_radius: f64,
    /// Identify `Δ` against the acceleration the vehicle actually produced
    /// from thrust and attitude rather than the command.
    pub label_with_applied: bool,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            duration: 30.0,
            ts: 0.1,
            dt: 0.01,
            plant: PlantKind::Quadcopter,
            divergence_radius: 50.0,
            label_with_applied: true,
        }
    }
}

impl MissionConfig {
    pub fn steps(&self) -> usize {
        (self.duration / self.ts).round() as usize
    }

    pub fn substeps(&self) -> usize {
        (self.ts / self.dt).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// s
    pub duration: f64,
    /// Sampling rate of the recorded pairs, Hz.
    pub rate: f64,
    /// Centre of the excitation reference, m.
    pub center: [f64; 3],
    /// Peak excursion per axis, m.
    pub amplitude: [f64; 3],
    /// Sinusoids per axis.
    pub components: usize,
    /// rad/s
    pub min_frequency: f64,
    pub max_frequency: f64,
    /// Uniform dither added to the commanded acceleration, m/s².
    pub dither: f64,
    /// Train under the pre-switch wind only.
    pub constant_wind: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            duration: 50.0,
            rate: 20.0,
            center: [0.0, 0.0, 3.0],
            amplitude: [2.5, 2.5, 1.2],
            components: 3,
            min_frequency: 0.2,
            max_frequency: 1.0,
            dither: 0.5,
            constant_wind: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub q: [f64; 6],
    /// Defaults to `q`.
    pub q_terminal: Option<[f64; 6]>,
    /// Input weights on (roll, pitch, thrust) deviations in rad, rad, N.
    /// They act on the acceleration command through the small-angle map
    /// `a_y ≈ -g φ`, `a_x ≈ g θ`, `a_z ≈ -δT / m`.
    pub r: [f64; 3],
    pub gamma: f64,
    pub position_bound: f64,
    pub velocity_bound: f64,
    /// Bound on each commanded acceleration component, m/s².
    pub accel_bound: f64,
    pub penalty: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol: f64,
    /// Linearize the predicted disturbance in the inner quadratic programs.
    pub linearize_disturbance: bool,
    /// Penalize `u - a_ref` instead of `u`.
    pub feedforward: bool,
    /// Subtract the predicted disturbance acceleration from the input reference.
    pub disturbance_feedforward: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            q: [1.0, 1.0, 20.0, 1.0, 1.0, 20.0],
            q_terminal: None,
            r: [1.0, 1.0, 1.0],
            gamma: 0.95,
            position_bound: 10.0,
            velocity_bound: 5.0,
            accel_bound: 6.0,
            penalty: 1e6,
            max_outer: 30,
            max_inner: 400,
            tol: 1e-6,
            linearize_disturbance: false,
            feedforward: true,
            disturbance_feedforward: true,
        }
    }
}

impl ControllerConfig {
    /// Input weight on the commanded acceleration.
    pub fn accel_weights(&self, quad: &QuadConfig) -> [f64; 3] {
        let g2 = quad.gravity * quad.gravity;
        [self.r[1] / g2, self.r[0] / g2, self.r[2] * quad.mass * quad.mass]
    }

    pub fn mpc(&self, quad: &QuadConfig) -> MpcConfig<f64> {
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        let (pb, vb) = (self.position_bound, self.velocity_bound);
        let (hx, h) = box_constraints(&[pb, pb, pb, vb, vb, vb]);
        MpcConfig {
            horizon: self.horizon,
            q: diag(&self.q),
            q_terminal: diag(&self.q_terminal.unwrap_or(self.q)),
            r: diag(&self.accel_weights(quad)),
            gamma: self.gamma,
            hx,
            h,
            u_min: DVector::from_element(3, -self.accel_bound),
            u_max: DVector::from_element(3, self.accel_bound),
            penalty: self.penalty,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            tol: self.tol,
            linearize_disturbance: self.linearize_disturbance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub pseudo_inputs: usize,
    /// Forgetting factor of the recursive updates.
    pub lambda: f64,
    /// Optimizer steps for offline training.
    pub train_steps: usize,
    /// Optimizer steps for the between-mission retraining.
    pub batch_steps: usize,
    /// Points the long-term GP is retrained on.
    pub batch_size: usize,
    /// Noise variance assumed by the recursive updates (online-gp and the
    /// short-term GP), floored at the trained value. Online samples carry the
    /// attitude-loop transients that the offline fit averages out.
    pub online_noise_variance: f64,
    /// Short-term signal variance relative to the long-term one.
    pub short_signal_scale: f64,
    /// Short-term length scales on the command inputs relative to the
    /// long-term ones.
    pub short_command_scale: f64,
    /// Let the between-mission retraining move the kernel's signal variance
    /// and length scales. When false only the noise and pseudo inputs move.
    pub batch_refit_kernel: bool,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            pseudo_inputs: 20,
            lambda: 0.995,
            train_steps: 500,
            batch_steps: 200,
            batch_size: 1000,
            online_noise_variance: 0.5,
            short_signal_scale: 1.0,
            batch_refit_kernel: false,
            short_command_scale: 10.0,
        }
    }
}

impl GpConfig {
    pub fn train(&self, seed: u64) -> SparseTrainConfig {
        SparseTrainConfig {
            max_steps: self.train_steps,
            seed,
            ..Default::default()
        }
    }

    pub fn batch(&self, seed: u64) -> SparseTrainConfig {
        let fixed = !self.batch_refit_kernel;
        SparseTrainConfig {
            max_steps: self.batch_steps,
            seed,
            fixed_length_scales: if fixed { (0..GP_INPUT_DIM).collect() } else { Vec::new() },
            fixed_signal_variance: fixed,
            ..Default::default()
        }
    }
}

/// Gaussian measurement noise on the translational state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub position_std: f64,
    pub velocity_std: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            position_std: 0.002,
            velocity_std: 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    pub iterations: usize,
    pub quad: QuadConfig,
    pub wind: WindConfig,
    pub pd: PdConfig,
    pub mission: MissionConfig,
    pub training: TrainingConfig,
    pub controller: ControllerConfig,
    pub gp: GpConfig,
    pub sensor: SensorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Dgp,
            iterations: 3,
            quad: QuadConfig::default(),
            wind: WindConfig::default(),
            pd: PdConfig::default(),
            mission: MissionConfig::default(),
            training: TrainingConfig::default(),
            controller: ControllerConfig::default(),
            gp: GpConfig::default(),
            sensor: SensorConfig::default(),
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(HarnessError::Config(msg.to_string()))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mission;
        check(m.duration > 0.0 && m.duration.is_finite(), "mission.duration must be positive")?;
        check(m.ts > 0.0 && m.dt > 0.0 && m.dt <= m.ts, "need 0 < mission.dt <= mission.ts")?;
        check(
            (m.ts / m.dt - (m.ts / m.dt).round()).abs() < 1e-9,
            "mission.ts must be a multiple of mission.dt",
        )?;
        check(self.iterations >= 1, "iterations must be at least 1")?;
        let t = &self.training;
        check(t.duration > 0.0 && t.rate > 0.0, "training duration and rate must be positive")?;
        check(
            (m.ts * t.rate * 2.0 - (m.ts * t.rate * 2.0).round()).abs() < 1e-9 && t.rate * m.ts >= 1.0 - 1e-9,
            "training.rate times mission.ts must be a positive multiple of 1/2",
        )?;
        check(t.components >= 1, "training.components must be at least 1")?;
        check(
            0.0 < t.min_frequency && t.min_frequency <= t.max_frequency,
            "need 0 < training.min_frequency <= training.max_frequency",
        )?;
        check(t.dither >= 0.0, "training.dither must be non-negative")?;
        let g = &self.gp;
        check(g.pseudo_inputs >= 1, "gp.pseudo_inputs must be at least 1")?;
        check(g.lambda > 0.0 && g.lambda <= 1.0, "gp.lambda must lie in (0, 1]")?;
        check(g.batch_size >= g.pseudo_inputs, "gp.batch_size must be at least gp.pseudo_inputs")?;
        check(
            g.online_noise_variance >= 0.0 && g.short_signal_scale > 0.0,
            "gp.online_noise_variance must be non-negative and gp.short_signal_scale positive",
        )?;
        check(g.short_command_scale > 0.0, "gp.short_command_scale must be positive")?;
        check(
            self.sensor.position_std >= 0.0 && self.sensor.velocity_std >= 0.0,
            "sensor noise must be non-negative",
        )?;
        let c = &self.controller;
        check(c.accel_bound > 0.0, "controller.accel_bound must be positive")?;
        c.mpc(&self.quad).validate()?;
        self.quad.params().validate()?;
        self.wind.model().validate()?;
        Ok(())
    }
}
