//! Chance-constrained GP-MPC on a linear model with a learned disturbance.
//!
//! Beliefs follow
//!
//! ```text
//! μ⁺ = A μ + B u + B_d μ_Δ(μ, u)
//! Σ⁺ = A Σ Aᵀ + B_d diag(σ²_Δ(μ, u)) B_dᵀ
//! ```
//!
//! and state constraints `H x ≤ h` are tightened row-wise by
//! `ϖ(γ) √(H Σ Hᵀ)_jj`.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gp_dual::DualGp;
use crate::gp_full::FullGp;
use crate::gp_online::OnlineSparseGp;
use crate::gp_sparse::SparseGp;
use crate::quad::LinearModel;
use crate::scalar::{lit, to_f64, Real};

/// Anything that predicts a mean and per-output variance of `Δ`.
pub trait DisturbanceModel<T: Real> {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)>;

    /// `∂μ/∂x̃` as an `output_dim × input_dim` matrix, by central differences
    /// unless overridden.
    fn mean_jacobian(&self, x: &[T]) -> Result<DMatrix<T>> {
        let step0: T = T::default_epsilon().powf(lit(1.0 / 3.0));
        let mut jac = DMatrix::zeros(self.output_dim(), x.len());
        let mut probe = x.to_vec();
        for j in 0..x.len() {
            let h = step0 * (T::one() + x[j].abs());
            probe[j] = x[j] + h;
            let (hi, _) = self.predict(&probe)?;
            probe[j] = x[j] - h;
            let (lo, _) = self.predict(&probe)?;
            probe[j] = x[j];
            jac.set_column(j, &((hi - lo) / (h + h)));
        }
        Ok(jac)
    }
}

impl<T: Real> DisturbanceModel<T> for SparseGp<T> {
    fn input_dim(&self) -> usize {
        SparseGp::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        SparseGp::output_dim(self)
    }
    fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        SparseGp::predict(self, x)
    }
}

impl<T: Real> DisturbanceModel<T> for OnlineSparseGp<T> {
    fn input_dim(&self) -> usize {
        self.model().input_dim()
    }
    fn output_dim(&self) -> usize {
        self.model().output_dim()
    }
    fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        OnlineSparseGp::predict(self, x)
    }
}

impl<T: Real> DisturbanceModel<T> for DualGp<T> {
    fn input_dim(&self) -> usize {
        DualGp::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        DualGp::output_dim(self)
    }
    fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        DualGp::predict(self, x)
    }
}

impl<T: Real> DisturbanceModel<T> for FullGp<T> {
    fn input_dim(&self) -> usize {
        self.data().input_dim()
    }
    fn output_dim(&self) -> usize {
        self.data().output_dim()
    }
    fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        FullGp::predict(self, x)
    }
}

/// `Δ ≡ 0` with zero variance: the controller becomes a plain linear MPC.
#[derive(Clone, Copy, Debug)]
pub struct ZeroDisturbance {
    pub input_dim: usize,
    pub output_dim: usize,
}

impl<T: Real> DisturbanceModel<T> for ZeroDisturbance {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!("expected input of dimension {}", self.input_dim)));
        }
        Ok((DVector::zeros(self.output_dim), DVector::zeros(self.output_dim)))
    }
}

#[derive(Clone, Debug)]
pub struct MpcConfig<T: Real> {
    pub horizon: usize,
    pub q: DMatrix<T>,
    pub q_terminal: DMatrix<T>,
    pub r: DMatrix<T>,
    pub gamma: T,
    /// State constraints `hx · x ≤ h`; zero rows disables them.
    pub hx: DMatrix<T>,
    pub h: DVector<T>,
    pub u_min: DVector<T>,
    pub u_max: DVector<T>,
    /// Quadratic penalty on tightened-constraint violation.
    pub penalty: T,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol: T,
    /// Linearize `μ_Δ` in the state and input around each rollout instead of
    /// holding it constant in the inner quadratic program.
    pub linearize_disturbance: bool,
}

impl<T: Real> MpcConfig<T> {
    /// Horizon 5, `Q = diag(1,1,20,1,1,20)`, `R = I`, `Q_T = Q`, `γ = 0.95`,
    /// `|p| ≤ 10`, `|v| ≤ 5`, `|u| ≤ u_bound` on the translational model.
    pub fn translational_default(u_bound: T) -> Self {
        let qd = [1.0, 1.0, 20.0, 1.0, 1.0, 20.0];
        let q = DMatrix::from_diagonal(&DVector::from_iterator(6, qd.iter().map(|v| lit(*v))));
        let (hx, h) = box_constraints(&[lit(10.0), lit(10.0), lit(10.0), lit(5.0), lit(5.0), lit(5.0)]);
        Self {
            horizon: 5,
            q_terminal: q.clone(),
            q,
            r: DMatrix::identity(3, 3),
            gamma: lit(0.95),
            hx,
            h,
            u_min: DVector::from_element(3, -u_bound),
            u_max: DVector::from_element(3, u_bound),
            penalty: lit(1e6),
            max_outer: 30,
            max_inner: 400,
            tol: lit(1e-6),
            linearize_disturbance: false,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if self.q.shape() != (n, n) || self.q_terminal.shape() != (n, n) || self.r.shape() != (m, m) {
            return Err(Error::Dimension("weight matrices must be square".into()));
        }
        if self.hx.ncols() != n || self.hx.nrows() != self.h.len() {
            return Err(Error::Dimension("constraint matrix does not match h or the state".into()));
        }
        if self.u_min.len() != m || self.u_max.len() != m {
            return Err(Error::Dimension("input bounds do not match R".into()));
        }
        if !(self.gamma > T::zero() && self.gamma < T::one()) {
            return Err(Error::InvalidParameter("gamma must lie in (0, 1)".into()));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidParameter("u_min must be below u_max".into()));
        }
        let sym = |m: &DMatrix<T>| (m - m.transpose()).amax() <= lit(1e-12);
        if !sym(&self.q) || !sym(&self.q_terminal) || !sym(&self.r) {
            return Err(Error::InvalidParameter("weight matrices must be symmetric".into()));
        }
        if crate::linalg::min_eigenvalue(&self.q) < lit(-1e-12) || crate::linalg::min_eigenvalue(&self.q_terminal) < lit(-1e-12) {
            return Err(Error::InvalidParameter("Q and Q_T must be positive semi-definite".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::InvalidParameter("R must be positive definite".into()));
        }
        if !(self.penalty > T::zero()) {
            return Err(Error::InvalidParameter("penalty must be positive".into()));
        }
        Ok(())
    }
}

/// `|x_i| ≤ b_i` as `H x ≤ h`.
pub fn box_constraints<T: Real>(bounds: &[T]) -> (DMatrix<T>, DVector<T>) {
    let n = bounds.len();
    let mut hx = DMatrix::zeros(2 * n, n);
    let mut h = DVector::zeros(2 * n);
    for (i, b) in bounds.iter().enumerate() {
        hx[(2 * i, i)] = T::one();
        hx[(2 * i + 1, i)] = -T::one();
        h[2 * i] = *b;
        h[2 * i + 1] = *b;
    }
    (hx, h)
}

/// Desired states `r_0..r_H` and input feedforward `u_ref,0..u_ref,H-1`
/// (zero reproduces the plain `uᵀ R u` penalty).
#[derive(Clone, Debug)]
pub struct HorizonReference<T: Real> {
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
}

impl<T: Real> HorizonReference<T> {
    pub fn states_only(states: Vec<DVector<T>>, input_dim: usize) -> Self {
        let h = states.len().saturating_sub(1);
        Self {
            states,
            inputs: vec![DVector::zeros(input_dim); h],
        }
    }

    pub fn constant(state: DVector<T>, horizon: usize, input_dim: usize) -> Self {
        Self::states_only(vec![state; horizon + 1], input_dim)
    }

    fn check(&self, horizon: usize, n: usize, m: usize) -> Result<()> {
        if self.states.len() != horizon + 1 || self.inputs.len() != horizon {
            return Err(Error::Dimension(format!("reference must cover {} states and {horizon} inputs", horizon + 1)));
        }
        if self.states.iter().any(|r| r.len() != n) || self.inputs.iter().any(|u| u.len() != m) {
            return Err(Error::Dimension("reference entries have the wrong size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeliefTrajectory<T: Real> {
    pub means: Vec<DVector<T>>,
    pub covariances: Vec<DMatrix<T>>,
    /// `μ_Δ`, `σ²_Δ` used at each step.
    pub delta_means: Vec<DVector<T>>,
    pub delta_variances: Vec<DVector<T>>,
}

impl<T: Real> BeliefTrajectory<T> {
    pub fn horizon(&self) -> usize {
        self.delta_means.len()
    }
}

/// GP input `(x, u)`.
pub fn gp_input<T: Real>(x: &DVector<T>, u: &DVector<T>) -> Vec<T> {
    x.iter().chain(u.iter()).copied().collect()
}

fn check_model<T: Real, G: DisturbanceModel<T> + ?Sized>(model: &LinearModel<T>, gp: &G) -> Result<()> {
    if gp.input_dim() != model.state_dim() + model.input_dim() {
        return Err(Error::Dimension(format!(
            "GP input dimension {} differs from state + input {}",
            gp.input_dim(),
            model.state_dim() + model.input_dim()
        )));
    }
    if gp.output_dim() != model.disturbance_dim() {
        return Err(Error::Dimension("GP outputs do not match B_d".into()));
    }
    Ok(())
}

/// Mean and covariance rollout with the GP evaluated at the predicted means.
pub fn propagate_belief<T: Real, G: DisturbanceModel<T> + ?Sized>(
    model: &LinearModel<T>,
    gp: &G,
    x0: &DVector<T>,
    useq: &[DVector<T>],
) -> Result<BeliefTrajectory<T>> {
    check_model(model, gp)?;
    let n = model.state_dim();
    if x0.len() != n || useq.iter().any(|u| u.len() != model.input_dim()) {
        return Err(Error::Dimension("initial state or inputs have the wrong size".into()));
    }
    let mut means = vec![x0.clone()];
    let mut covs = vec![DMatrix::zeros(n, n)];
    let mut dm = Vec::with_capacity(useq.len());
    let mut dv = Vec::with_capacity(useq.len());
    for u in useq {
        let mu = means.last().unwrap();
        let sigma = covs.last().unwrap();
        let (md, vd) = gp.predict(&gp_input(mu, u))?;
        let next = &model.a * mu + &model.b * u + &model.bd * &md;
        let vd_clamped = vd.map(|v| v.max(T::zero()));
        let bd_scaled = DMatrix::from_fn(n, vd.len(), |i, j| model.bd[(i, j)] * vd_clamped[j]);
        let mut cov = &model.a * sigma * model.a.transpose() + bd_scaled * model.bd.transpose();
        crate::linalg::symmetrize(&mut cov);
        means.push(next);
        covs.push(cov);
        dm.push(md);
        dv.push(vd);
    }
    Ok(BeliefTrajectory {
        means,
        covariances: covs,
        delta_means: dm,
        delta_variances: dv,
    })
}

/// Expected quadratic cost: tracking and trace terms for `i = 0..H-1` with `Q`,
/// the terminal pair with `Q_T`, and `(u - u_ref)ᵀ R (u - u_ref)`.
pub fn deterministic_cost<T: Real>(
    belief: &BeliefTrajectory<T>,
    useq: &[DVector<T>],
    refs: &HorizonReference<T>,
    cfg: &MpcConfig<T>,
) -> Result<T> {
    let h = useq.len();
    if belief.means.len() != h + 1 || belief.covariances.len() != h + 1 {
        return Err(Error::Dimension("belief and input sequence lengths differ".into()));
    }
    refs.check(h, cfg.state_dim(), cfg.input_dim())?;
    let mut cost = T::zero();
    for i in 0..=h {
        let w = if i == h { &cfg.q_terminal } else { &cfg.q };
        let e = &belief.means[i] - &refs.states[i];
        cost += (e.transpose() * w * &e)[(0, 0)] + (w * &belief.covariances[i]).trace();
        if i < h {
            let du = &useq[i] - &refs.inputs[i];
            cost += (du.transpose() * &cfg.r * &du)[(0, 0)];
        }
    }
    Ok(cost)
}

/// Standard normal quantile `ϖ(γ)`.
pub fn quantile<T: Real>(gamma: T) -> Result<T> {
    let g = to_f64(gamma);
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile level must lie in (0, 1), got {g}")));
    }
    let normal = Normal::standard();
    Ok(lit(normal.inverse_cdf(g)))
}

/// `h - ϖ(γ) √diag(H Σ_i Hᵀ)` for every belief step.
pub fn tightened_bounds<T: Real>(belief: &BeliefTrajectory<T>, cfg: &MpcConfig<T>) -> Result<Vec<DVector<T>>> {
    let w = quantile(cfg.gamma)?;
    let tol: T = lit(-1e-8);
    belief
        .covariances
        .iter()
        .map(|sigma| {
            let hs = &cfg.hx * sigma;
            let mut out = cfg.h.clone();
            for j in 0..cfg.hx.nrows() {
                let var = hs.row(j).dot(&cfg.hx.row(j));
                if var < tol {
                    return Err(Error::Numerical(format!("negative constraint variance {var}")));
                }
                out[j] -= w * var.max(T::zero()).sqrt();
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcDiagnostics<T: Real> {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub cost: T,
    /// Expected cost (without penalty) at the returned inputs.
    pub expected_cost: T,
    pub warm_start_cost: T,
    /// Largest violation of a tightened state constraint (0 when satisfied).
    pub max_violation: T,
    pub infeasible: bool,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct MpcSolution<T: Real> {
    pub u0: DVector<T>,
    pub useq: Vec<DVector<T>>,
    pub belief: BeliefTrajectory<T>,
    pub diagnostics: MpcDiagnostics<T>,
}

/// Frozen-disturbance quadratic model of the objective in the stacked inputs.
struct Condensed<T: Real> {
    /// `∂μ_i/∂U`, `i = 0..H`.
    su: Vec<DMatrix<T>>,
    /// `μ_i` at `U = 0` with the frozen or linearized `μ_Δ`.
    offset: Vec<DVector<T>>,
    bounds: Vec<DVector<T>>,
    hess: DMatrix<T>,
    lin: DVector<T>,
    constant: T,
}

impl<T: Real> Condensed<T> {
    fn build(
        model: &LinearModel<T>,
        cfg: &MpcConfig<T>,
        x0: &DVector<T>,
        belief: &BeliefTrajectory<T>,
        refs: &HorizonReference<T>,
        useq: &[DVector<T>],
        jacobians: Option<&[DMatrix<T>]>,
    ) -> Result<Self> {
        let h = cfg.horizon;
        let n = model.state_dim();
        let m = model.input_dim();
        let mut su = vec![DMatrix::zeros(n, h * m)];
        let mut offset = vec![x0.clone()];
        for i in 0..h {
            let (a, b, c) = match jacobians {
                Some(jac) => {
                    // μ ≈ μ̄ + J_x (x - x̄) + J_u (u - ū)
                    let jx = jac[i].columns(0, n);
                    let ju = jac[i].columns(n, m);
                    let c = &belief.delta_means[i] - jx * &belief.means[i] - ju * &useq[i];
                    (&model.a + &model.bd * jx, &model.b + &model.bd * ju, &model.bd * c)
                }
                None => (model.a.clone(), model.b.clone(), &model.bd * &belief.delta_means[i]),
            };
            let mut next = &a * &su[i];
            let mut block = next.view_mut((0, i * m), (n, m));
            block += &b;
            su.push(next);
            let o = &a * &offset[i] + c;
            offset.push(o);
        }
        let mut hess = DMatrix::zeros(h * m, h * m);
        let mut lin = DVector::zeros(h * m);
        let mut constant = T::zero();
        let two: T = lit(2.0);
        for i in 0..=h {
            let w = if i == h { &cfg.q_terminal } else { &cfg.q };
            let e = &offset[i] - &refs.states[i];
            let wsu = w * &su[i];
            hess += su[i].tr_mul(&wsu) * two;
            lin += wsu.tr_mul(&e) * two;
            constant += (e.transpose() * w * &e)[(0, 0)] + (w * &belief.covariances[i]).trace();
        }
        for i in 0..h {
            let mut block = hess.view_mut((i * m, i * m), (m, m));
            block += &cfg.r * two;
            let ur = &refs.inputs[i];
            let mut seg = lin.rows_mut(i * m, m);
            seg -= &cfg.r * ur * two;
            constant += (ur.transpose() * &cfg.r * ur)[(0, 0)];
        }
        let bounds = tightened_bounds(belief, cfg)?;
        Ok(Self {
            su,
            offset,
            bounds,
            hess,
            lin,
            constant,
        })
    }

    /// Objective, gradient and the rows of active penalties.
    fn eval(&self, cfg: &MpcConfig<T>, u: &DVector<T>) -> (T, DVector<T>, DMatrix<T>) {
        let half: T = lit(0.5);
        let two: T = lit(2.0);
        let hu = &self.hess * u;
        let mut value = self.constant + u.dot(&self.lin) + half * u.dot(&hu);
        let mut grad = hu + &self.lin;
        let mut pen_hess = DMatrix::zeros(u.len(), u.len());
        if cfg.hx.nrows() > 0 {
            for i in 1..self.su.len() {
                let mu = &self.su[i] * u + &self.offset[i];
                let viol = &cfg.hx * mu - &self.bounds[i];
                for j in 0..viol.len() {
                    if viol[j] > T::zero() {
                        let row = (cfg.hx.row(j) * &self.su[i]).transpose();
                        value += cfg.penalty * viol[j] * viol[j];
                        grad += &row * (two * cfg.penalty * viol[j]);
                        pen_hess += &row * row.transpose() * (two * cfg.penalty);
                    }
                }
            }
        }
        (value, grad, pen_hess)
    }
}

fn project<T: Real>(u: &DVector<T>, lo: &DVector<T>, hi: &DVector<T>) -> DVector<T> {
    let m = lo.len();
    DVector::from_fn(u.len(), |k, _| u[k].max(lo[k % m]).min(hi[k % m]))
}

fn stack<T: Real>(useq: &[DVector<T>]) -> DVector<T> {
    DVector::from_iterator(useq.iter().map(|u| u.len()).sum(), useq.iter().flat_map(|u| u.iter().copied()))
}

fn unstack<T: Real>(u: &DVector<T>, m: usize) -> Vec<DVector<T>> {
    (0..u.len() / m).map(|i| u.rows(i * m, m).into_owned()).collect()
}

/// Box-constrained minimization of the frozen quadratic plus penalty:
/// projected gradient steps interleaved with Newton steps on the free set.
fn solve_frozen<T: Real>(qp: &Condensed<T>, cfg: &MpcConfig<T>, start: &DVector<T>) -> (DVector<T>, usize) {
    let lo = &cfg.u_min;
    let hi = &cfg.u_max;
    let m = lo.len();
    let mut u = project(start, lo, hi);
    let (mut f, mut g, mut ph) = qp.eval(cfg, &u);
    let tiny: T = lit(1e-14);
    let mut iters = 0;
    let eps: T = lit(1e-12);
    while iters < cfg.max_inner {
        iters += 1;
        // Newton step on coordinates not pinned at a bound
        let free: Vec<usize> = (0..u.len())
            .filter(|&k| {
                let at_lo = u[k] <= lo[k % m] + eps && g[k] > T::zero();
                let at_hi = u[k] >= hi[k % m] - eps && g[k] < T::zero();
                !(at_lo || at_hi)
            })
            .collect();
        let mut improved = false;
        if !free.is_empty() {
            let full = &qp.hess + &ph;
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| full[(free[a], free[b])]);
            let gf = DVector::from_fn(free.len(), |a, _| g[free[a]]);
            if let Some(ch) = hff.cholesky() {
                let step = ch.solve(&gf);
                let mut t = T::one();
                for _ in 0..30 {
                    let mut trial = u.clone();
                    for (a, &k) in free.iter().enumerate() {
                        trial[k] -= t * step[a];
                    }
                    let trial = project(&trial, lo, hi);
                    let (ft, gt, pt) = qp.eval(cfg, &trial);
                    if ft < f {
                        let gain = f - ft;
                        u = trial;
                        f = ft;
                        g = gt;
                        ph = pt;
                        improved = gain > tiny * (T::one() + f.abs());
                        break;
                    }
                    t *= lit(0.5);
                }
            }
        }
        // projected gradient step with exact line search on the local quadratic
        let pg = project(&(&u - &g), lo, hi) - &u;
        if pg.amax() <= eps {
            if !improved {
                break;
            }
            continue;
        }
        let full = &qp.hess + &ph;
        let curv = pg.dot(&(&full * &pg));
        let slope = g.dot(&pg);
        let mut t = if curv > T::zero() { (-slope / curv).min(T::one()) } else { T::one() };
        let mut pg_improved = false;
        for _ in 0..40 {
            let trial = project(&(&u + &pg * t), lo, hi);
            let (ft, gt, pt) = qp.eval(cfg, &trial);
            if ft < f {
                let gain = f - ft;
                u = trial;
                f = ft;
                g = gt;
                ph = pt;
                pg_improved = gain > tiny * (T::one() + f.abs());
                break;
            }
            t *= lit(0.5);
        }
        if !improved && !pg_improved {
            break;
        }
    }
    (u, iters)
}

fn true_objective<T: Real, G: DisturbanceModel<T> + ?Sized>(
    model: &LinearModel<T>,
    gp: &G,
    cfg: &MpcConfig<T>,
    x0: &DVector<T>,
    refs: &HorizonReference<T>,
    useq: &[DVector<T>],
) -> Result<(T, T, T, BeliefTrajectory<T>)> {
    let belief = propagate_belief(model, gp, x0, useq)?;
    let expected = deterministic_cost(&belief, useq, refs, cfg)?;
    let bounds = tightened_bounds(&belief, cfg)?;
    let mut penalty = T::zero();
    let mut worst = T::zero();
    if cfg.hx.nrows() > 0 {
        for i in 1..belief.means.len() {
            let viol = &cfg.hx * &belief.means[i] - &bounds[i];
            for v in viol.iter() {
                if *v > T::zero() {
                    penalty += cfg.penalty * *v * *v;
                    worst = worst.max(*v);
                }
            }
        }
    }
    Ok((expected + penalty, expected, worst, belief))
}

/// Receding-horizon solve. The disturbance terms are frozen (or linearized)
/// along the current rollout, the resulting box-constrained quadratic program
/// is solved, and the step towards its minimizer is accepted by line search on
/// the true objective.
/// The best iterate is returned, so the cost never exceeds the warm start's.
pub fn solve_mpc<T: Real, G: DisturbanceModel<T> + ?Sized>(
    cfg: &MpcConfig<T>,
    model: &LinearModel<T>,
    gp: &G,
    x0: &DVector<T>,
    refs: &HorizonReference<T>,
    warm_start: Option<&[DVector<T>]>,
) -> Result<MpcSolution<T>> {
    cfg.validate()?;
    let h = cfg.horizon;
    let n = model.state_dim();
    let m = model.input_dim();
    if cfg.state_dim() != n || cfg.input_dim() != m {
        return Err(Error::Dimension("MPC weights do not match the model".into()));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("MPC initial state"));
    }
    refs.check(h, n, m)?;
    check_model(model, gp)?;
    let start: Vec<DVector<T>> = match warm_start {
        Some(w) if w.len() == h && w.iter().all(|u| u.len() == m) => w.to_vec(),
        Some(_) => return Err(Error::Dimension("warm start has the wrong shape".into())),
        None => vec![DVector::zeros(m); h],
    };
    let mut u = project(&stack(&start), &cfg.u_min, &cfg.u_max);
    let (mut cost, mut expected, mut worst, mut belief) = true_objective(model, gp, cfg, x0, refs, &unstack(&u, m))?;
    let warm_cost = cost;
    let mut outer = 0;
    let mut inner_total = 0;
    let mut converged = false;
    while outer < cfg.max_outer {
        outer += 1;
        let useq = unstack(&u, m);
        let jacobians = if cfg.linearize_disturbance {
            Some(
                belief
                    .means
                    .iter()
                    .zip(useq.iter())
                    .map(|(x, ui)| gp.mean_jacobian(&gp_input(x, ui)))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let qp = Condensed::build(model, cfg, x0, &belief, refs, &useq, jacobians.as_deref())?;
        let (target, inner) = solve_frozen(&qp, cfg, &u);
        inner_total += inner;
        let dir = &target - &u;
        if dir.amax() <= cfg.tol * (T::one() + u.amax()) {
            converged = true;
            break;
        }
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..20 {
            let trial = &u + &dir * t;
            let (c, e, w, b) = true_objective(model, gp, cfg, x0, refs, &unstack(&trial, m))?;
            if c.is_finite() && c <= cost {
                let gain = cost - c;
                u = trial;
                cost = c;
                expected = e;
                worst = w;
                belief = b;
                accepted = true;
                if gain <= cfg.tol * (T::one() + cost.abs()) {
                    converged = true;
                }
                break;
            }
            t *= lit(0.5);
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    let useq = unstack(&u, m);
    Ok(MpcSolution {
        u0: useq[0].clone(),
        useq,
        belief,
        diagnostics: MpcDiagnostics {
            outer_iterations: outer,
            inner_iterations: inner_total,
            cost,
            expected_cost: expected,
            warm_start_cost: warm_cost,
            max_violation: worst,
            infeasible: worst > T::zero(),
            converged,
        },
    })
}
