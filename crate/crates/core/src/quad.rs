//! Rigid-body quadcopter model with z pointing down (`e₃` along
//! gravity), wind disturbance, attitude PD loop and the linear models used by
//! the controller.
//!
//! Attitude `ζ = (φ, θ, ψ)` composes as `R = R_z(ψ) R_x(φ) R_y(θ)`, which is
//! the convention whose body-rate map is exactly the bracketed matrix
//! `[cθ 0 -sθcφ; 0 1 sφ; sθ 0 cθcφ]`.

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

pub const STATE_DIM: usize = 12;
pub const INPUT_DIM: usize = 4;
/// Distance to the Euler-angle singularities at which an error is raised.
pub const GIMBAL_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct QuadState<T: Real> {
    pub p: Vector3<T>,
    pub v: Vector3<T>,
    pub zeta: Vector3<T>,
    pub omega: Vector3<T>,
}

impl<T: Real> QuadState<T> {
    pub fn at_rest(p: Vector3<T>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            zeta: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> SVector<T, STATE_DIM> {
        let mut x = SVector::<T, STATE_DIM>::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.p);
        x.fixed_rows_mut::<3>(3).copy_from(&self.v);
        x.fixed_rows_mut::<3>(6).copy_from(&self.zeta);
        x.fixed_rows_mut::<3>(9).copy_from(&self.omega);
        x
    }

    pub fn from_vector(x: &SVector<T, STATE_DIM>) -> Self {
        Self {
            p: x.fixed_rows::<3>(0).into_owned(),
            v: x.fixed_rows::<3>(3).into_owned(),
            zeta: x.fixed_rows::<3>(6).into_owned(),
            omega: x.fixed_rows::<3>(9).into_owned(),
        }
    }

    /// `(p, v)`.
    pub fn translational(&self) -> DVector<T> {
        DVector::from_iterator(6, self.p.iter().chain(self.v.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ControlInput<T: Real> {
    pub thrust: T,
    pub torque: Vector3<T>,
}

impl<T: Real> ControlInput<T> {
    pub fn new(thrust: T, torque: Vector3<T>) -> Self {
        Self { thrust, torque }
    }

    pub fn hover(params: &QuadParams<T>) -> Self {
        Self::new(params.mass * params.gravity, Vector3::zeros())
    }

    /// Clamps thrust to `[0, T_max]` and each torque to `±τ_max`.
    pub fn saturate(&self, params: &QuadParams<T>) -> Self {
        let t = self.thrust.max(T::zero()).min(params.thrust_max);
        let tau = self.torque.map(|v| v.max(-params.torque_max).min(params.torque_max));
        Self::new(t, tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct QuadParams<T: Real> {
    pub mass: T,
    pub inertia: Matrix3<T>,
    pub gravity: T,
    pub thrust_max: T,
    pub torque_max: T,
}

impl<T: Real> Default for QuadParams<T> {
    fn default() -> Self {
        let mass: T = lit(0.5);
        let gravity: T = lit(9.81);
        Self {
            mass,
            inertia: Matrix3::from_diagonal(&Vector3::new(lit(3.2e-3), lit(3.2e-3), lit(5.5e-3))),
            gravity,
            thrust_max: lit::<T>(4.0) * mass * gravity,
            torque_max: lit(0.15),
        }
    }
}

impl<T: Real> QuadParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > T::zero() && self.gravity > T::zero() && self.thrust_max > T::zero() && self.torque_max > T::zero()) {
            return Err(Error::InvalidParameter("mass, gravity and actuator limits must be positive".into()));
        }
        let sym = (self.inertia - self.inertia.transpose()).amax();
        if sym > lit(1e-12) || self.inertia.cholesky().is_none() {
            return Err(Error::InvalidParameter("inertia must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

/// Wind velocity `w(t) = w₀` before `switch_time` and
/// `w₀ + a·sin(f·(t - switch_time))` after, acting through a body-weighted
/// drag `F = c_d R diag(b) Rᵀ (w - v)` and a torque `τ = κ (R e₃) × F`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct WindModel<T: Real> {
    pub constant: Vector3<T>,
    pub amplitude: Vector3<T>,
    pub frequency: T,
    pub switch_time: T,
    pub drag_coefficient: T,
    pub body_weights: Vector3<T>,
    pub torque_arm: T,
}

impl<T: Real> Default for WindModel<T> {
    fn default() -> Self {
        Self {
            constant: Vector3::new(lit(1.0), lit(3.0), lit(-2.0)),
            amplitude: Vector3::new(lit(-2.0), lit(-3.0), lit(3.0)),
            frequency: lit(std::f64::consts::PI / 10.0),
            switch_time: lit(10.0),
            drag_coefficient: lit(0.25),
            body_weights: Vector3::new(lit(1.0), lit(1.0), lit(1.5)),
            torque_arm: lit(0.05),
        }
    }
}

impl<T: Real> WindModel<T> {
    pub fn calm() -> Self {
        Self {
            constant: Vector3::zeros(),
            amplitude: Vector3::zeros(),
            ..Self::default()
        }
    }

    /// No aerodynamic interaction at all.
    pub fn none() -> Self {
        Self {
            drag_coefficient: T::zero(),
            ..Self::calm()
        }
    }

    /// Same wind without the time-varying part.
    pub fn constant_only(&self) -> Self {
        Self {
            amplitude: Vector3::zeros(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frequency >= T::zero() && self.switch_time >= T::zero() && self.drag_coefficient >= T::zero()) {
            return Err(Error::InvalidParameter("wind frequency, switch time and drag must be non-negative".into()));
        }
        Ok(())
    }

    pub fn velocity(&self, t: T) -> Vector3<T> {
        if t < self.switch_time {
            self.constant
        } else {
            self.constant + self.amplitude * (self.frequency * (t - self.switch_time)).sin()
        }
    }

    /// `(F_Δ, τ_Δ)` acting on `state` at time `t`.
    pub fn disturbance(&self, t: T, state: &QuadState<T>) -> (Vector3<T>, Vector3<T>) {
        let r = rotation_matrix(&state.zeta);
        let rel = self.velocity(t) - state.v;
        let body = r.transpose() * rel;
        let force = r * body.component_mul(&self.body_weights) * self.drag_coefficient;
        let torque = (r.column(2).into_owned()).cross(&force) * self.torque_arm;
        (force, torque)
    }
}

pub fn wind_force<T: Real>(wind: &WindModel<T>, t: T, state: &QuadState<T>) -> (Vector3<T>, Vector3<T>) {
    wind.disturbance(t, state)
}

/// `R = R_z(ψ) R_x(φ) R_y(θ)`, body to inertial.
pub fn rotation_matrix<T: Real>(zeta: &Vector3<T>) -> Matrix3<T> {
    let (sf, cf) = zeta[0].sin_cos();
    let (st, ct) = zeta[1].sin_cos();
    let (sp, cp) = zeta[2].sin_cos();
    let (o, i) = (T::zero(), T::one());
    let rz = Matrix3::new(cp, -sp, o, sp, cp, o, o, o, i);
    let rx = Matrix3::new(i, o, o, o, cf, -sf, o, sf, cf);
    let ry = Matrix3::new(ct, o, st, o, i, o, -st, o, ct);
    rz * rx * ry
}

/// Body rates from Euler-angle rates: `ω = W ζ̇`.
pub fn body_rate_matrix<T: Real>(zeta: &Vector3<T>) -> Matrix3<T> {
    let (sf, cf) = zeta[0].sin_cos();
    let (st, ct) = zeta[1].sin_cos();
    let o = T::zero();
    Matrix3::new(ct, o, -st * cf, o, T::one(), sf, st, o, ct * cf)
}

fn check_gimbal<T: Real>(zeta: &Vector3<T>) -> Result<()> {
    let limit: T = lit(std::f64::consts::FRAC_PI_2 - GIMBAL_MARGIN);
    if !zeta.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("attitude"));
    }
    if zeta[0].abs() >= limit || zeta[1].abs() >= limit {
        return Err(Error::GimbalSingularity {
            roll: to_f64(zeta[0]),
            pitch: to_f64(zeta[1]),
        });
    }
    Ok(())
}

/// `Θ = W⁻¹`, mapping body rates to Euler-angle rates.
pub fn euler_rate_matrix<T: Real>(zeta: &Vector3<T>) -> Result<Matrix3<T>> {
    check_gimbal(zeta)?;
    let (sf, cf) = zeta[0].sin_cos();
    let (st, ct) = zeta[1].sin_cos();
    let o = T::zero();
    // closed-form inverse of the body-rate matrix, det = cos φ
    Ok(Matrix3::new(
        ct,
        o,
        st,
        st * sf / cf,
        T::one(),
        -ct * sf / cf,
        -st / cf,
        o,
        ct / cf,
    ))
}

/// Right-hand side of the rigid-body equations.
pub fn derivatives<T: Real>(
    state: &QuadState<T>,
    u: &ControlInput<T>,
    force: &Vector3<T>,
    torque: &Vector3<T>,
    params: &QuadParams<T>,
) -> Result<QuadState<T>> {
    let theta = euler_rate_matrix(&state.zeta)?;
    let r = rotation_matrix(&state.zeta);
    let e3 = Vector3::z();
    let vdot = e3 * params.gravity - r * e3 * (u.thrust / params.mass) + force / params.mass;
    let j = &params.inertia;
    let jw = j * state.omega;
    let rhs = -state.omega.cross(&jw) + u.torque + torque;
    let wdot = j.cholesky().ok_or(Error::InvalidParameter("inertia not positive definite".into()))?.solve(&rhs);
    Ok(QuadState {
        p: state.v,
        v: vdot,
        zeta: theta * state.omega,
        omega: wdot,
    })
}

/// One classical Runge-Kutta step with the input held and the wind evaluated
/// at the stage times.
pub fn step<T: Real>(
    state: &QuadState<T>,
    u: &ControlInput<T>,
    wind: &WindModel<T>,
    t: T,
    params: &QuadParams<T>,
    dt: T,
) -> Result<QuadState<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidParameter("integration step must be positive".into()));
    }
    let half: T = lit(0.5);
    let f = |s: &SVector<T, STATE_DIM>, tt: T| -> Result<SVector<T, STATE_DIM>> {
        let qs = QuadState::from_vector(s);
        let (fd, td) = wind.disturbance(tt, &qs);
        Ok(derivatives(&qs, u, &fd, &td, params)?.to_vector())
    };
    let x = state.to_vector();
    let k1 = f(&x, t)?;
    let k2 = f(&(x + k1 * (dt * half)), t + dt * half)?;
    let k3 = f(&(x + k2 * (dt * half)), t + dt * half)?;
    let k4 = f(&(x + k3 * dt), t + dt)?;
    let next = x + (k1 + (k2 + k3) * lit::<T>(2.0) + k4) * (dt / lit::<T>(6.0));
    let out = QuadState::from_vector(&next);
    if !out.is_finite() {
        return Err(Error::NonFinite("simulated state"));
    }
    check_gimbal(&out.zeta)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PdGains<T: Real> {
    pub kp: Vector3<T>,
    pub kd: Vector3<T>,
}

impl<T: Real> Default for PdGains<T> {
    /// Natural frequency 25 rad/s, damping 0.8 for the default inertia.
    fn default() -> Self {
        Self {
            kp: Vector3::new(lit(2.0), lit(2.0), lit(3.44)),
            kd: Vector3::new(lit(0.128), lit(0.128), lit(0.22)),
        }
    }
}

/// `τ = -K_p (ζ - ζ_ref) - K_d ω`, saturated at `±τ_max`.
pub fn pd_attitude<T: Real>(
    zeta: &Vector3<T>,
    omega: &Vector3<T>,
    zeta_ref: &Vector3<T>,
    gains: &PdGains<T>,
    torque_max: T,
) -> Vector3<T> {
    let tau = -(zeta - zeta_ref).component_mul(&gains.kp) - omega.component_mul(&gains.kd);
    tau.map(|v| v.max(-torque_max).min(torque_max))
}

/// Holds `thrust` and `zeta_ref` for `steps` integrator steps of `dt`, closing
/// the attitude loop at every step. Returns the final state.
#[allow(clippy::too_many_arguments)]
pub fn simulate_attitude_hold<T: Real>(
    state: &QuadState<T>,
    thrust: T,
    zeta_ref: &Vector3<T>,
    gains: &PdGains<T>,
    wind: &WindModel<T>,
    t0: T,
    params: &QuadParams<T>,
    dt: T,
    steps: usize,
) -> Result<QuadState<T>> {
    let mut s = *state;
    let mut t = t0;
    for _ in 0..steps {
        let tau = pd_attitude(&s.zeta, &s.omega, zeta_ref, gains, params.torque_max);
        let u = ControlInput::new(thrust, tau).saturate(params);
        s = step(&s, &u, wind, t, params, dt)?;
        t += dt;
    }
    Ok(s)
}

/// Discrete model `x⁺ = A x + B u + B_d Δ`. `delta_rows` are the rows on which
/// `Δ` is identified from data.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub bd: DMatrix<T>,
    pub ts: T,
    pub delta_rows: Vec<usize>,
}

impl<T: Real> LinearModel<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, bd: DMatrix<T>, ts: T, delta_rows: Vec<usize>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || bd.nrows() != n {
            return Err(Error::Dimension("A, B and B_d must have the same number of rows".into()));
        }
        if !(ts > T::zero()) {
            return Err(Error::InvalidParameter("sampling time must be positive".into()));
        }
        if delta_rows.iter().any(|&r| r >= n) || delta_rows.len() < bd.ncols() {
            return Err(Error::Dimension("disturbance rows out of range or too few".into()));
        }
        Ok(Self { a, b, bd, ts, delta_rows })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.bd.ncols()
    }

    /// `A x + B u + B_d Δ`.
    pub fn step(&self, x: &DVector<T>, u: &DVector<T>, delta: &DVector<T>) -> DVector<T> {
        &self.a * x + &self.b * u + &self.bd * delta
    }
}

/// Zero-order-hold discretization of `(A_c, [B_c | B_dc])` via the exponential
/// of the augmented generator.
fn zoh<T: Real>(ac: &DMatrix<T>, bc: &DMatrix<T>, ts: T) -> (DMatrix<T>, DMatrix<T>) {
    let n = ac.nrows();
    let m = bc.ncols();
    let mut gen = DMatrix::zeros(n + m, n + m);
    gen.view_mut((0, 0), (n, n)).copy_from(&(ac * ts));
    gen.view_mut((0, n), (n, m)).copy_from(&(bc * ts));
    let mut term = DMatrix::identity(n + m, n + m);
    let mut sum = term.clone();
    let tol: T = lit(1e-18);
    for k in 1..60 {
        term = &term * &gen / lit::<T>(k as f64);
        sum += &term;
        if term.amax() <= tol * sum.amax() {
            break;
        }
    }
    (sum.view((0, 0), (n, n)).into_owned(), sum.view((0, n), (n, m)).into_owned())
}

/// Twelve-state model linearized at hover. Inputs are deviations
/// `(T - m g, τ)`, `Δ = (F_Δ, τ_Δ)` enters through `(1/m, J⁻¹)` on the
/// velocity and body-rate channels.
pub fn linearize_hover<T: Real>(params: &QuadParams<T>, ts: T) -> Result<LinearModel<T>> {
    params.validate()?;
    let n = STATE_DIM;
    let g = params.gravity;
    let jinv = params.inertia.try_inverse().ok_or(Error::InvalidParameter("singular inertia".into()))?;
    let mut ac = DMatrix::zeros(n, n);
    for i in 0..3 {
        ac[(i, 3 + i)] = T::one();
        ac[(6 + i, 9 + i)] = T::one();
    }
    // R e₃ ≈ (θ, -φ, 1) at small angles
    ac[(3, 7)] = -g;
    ac[(4, 6)] = g;
    let mut bc = DMatrix::zeros(n, INPUT_DIM + 6);
    bc[(5, 0)] = -T::one() / params.mass;
    for i in 0..3 {
        for j in 0..3 {
            bc[(9 + i, 1 + j)] = jinv[(i, j)];
            bc[(9 + i, 7 + j)] = jinv[(i, j)];
        }
        bc[(3 + i, 4 + i)] = T::one() / params.mass;
    }
    let (a, bb) = zoh(&ac, &bc, ts);
    let b = bb.columns(0, INPUT_DIM).into_owned();
    let bd = bb.columns(INPUT_DIM, 6).into_owned();
    LinearModel::new(a, b, bd, ts, vec![3, 4, 5, 9, 10, 11])
}

/// Six-state translational model `(p, v)` driven by the commanded acceleration
/// `a = g e₃ - (T/m) R e₃`, with `Δ = F_Δ` in newtons on the velocity rows.
pub fn translational_model<T: Real>(params: &QuadParams<T>, ts: T) -> Result<LinearModel<T>> {
    params.validate()?;
    let mut ac = DMatrix::zeros(6, 6);
    let mut bc = DMatrix::zeros(6, 6);
    for i in 0..3 {
        ac[(i, 3 + i)] = T::one();
        bc[(3 + i, i)] = T::one();
        bc[(3 + i, 3 + i)] = T::one() / params.mass;
    }
    let (a, bb) = zoh(&ac, &bc, ts);
    LinearModel::new(a, bb.columns(0, 3).into_owned(), bb.columns(3, 3).into_owned(), ts, vec![3, 4, 5])
}

/// Thrust and attitude reference (`ψ_ref = 0`) realizing the commanded
/// acceleration, with thrust clamped to `[0, T_max]`.
pub fn attitude_from_acceleration<T: Real>(accel: &Vector3<T>, params: &QuadParams<T>) -> (T, Vector3<T>) {
    let f = Vector3::z() * params.gravity - accel;
    let norm = f.norm();
    if norm <= lit(1e-9) {
        return (T::zero(), Vector3::zeros());
    }
    let nvec = f / norm;
    let thrust = (params.mass * norm).min(params.thrust_max);
    let pitch = nvec[0].max(-T::one()).min(T::one()).asin();
    let roll = (-nvec[1]).atan2(nvec[2]);
    (thrust, Vector3::new(roll, pitch, T::zero()))
}

/// Least-squares `Δ` with `B_d Δ = x⁺ - A x - B u` on the model's disturbance rows.
pub fn true_delta<T: Real>(x: &DVector<T>, u: &DVector<T>, x_next: &DVector<T>, model: &LinearModel<T>) -> Result<DVector<T>> {
    let n = model.state_dim();
    if x.len() != n || x_next.len() != n || u.len() != model.input_dim() {
        return Err(Error::Dimension("state or input size does not match the model".into()));
    }
    let resid = x_next - &model.a * x - &model.b * u;
    let rows = &model.delta_rows;
    let bd = model.bd.select_rows(rows);
    let r = DVector::from_iterator(rows.len(), rows.iter().map(|&i| resid[i]));
    let svd = bd.svd(true, true);
    svd.solve(&r, lit(1e-14)).map_err(|e| Error::Numerical(e.to_string()))
}
