//! Dual GP: a frozen long-term sparse GP plus a short-term sparse GP whose
//! posterior is adapted online on the long-term residual.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp_online::{RecursiveState, UpdateInfo};
use crate::gp_sparse::{train_sparse_from, SparseGp, SparseTrainConfig, TrainReport, VariationalPosterior};
use crate::kernels::{kernel_matrix, Hyperparameters};
use crate::linalg::Factor;
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct DualGp<T: Real> {
    long: SparseGp<T>,
    /// Kernel `v`, pseudo inputs `z_s` and the prior `(0, V_M)`.
    short: SparseGp<T>,
    state: RecursiveState<T>,
}

impl<T: Real> DualGp<T> {
    /// Short-term GP with its own hyperparameters and pseudo inputs, started at
    /// `m_us = 0`, `S_us = V_M`.
    pub fn new(long: SparseGp<T>, short_hypers: Vec<Hyperparameters<T>>, short_pseudo: DMatrix<T>, lambda: T) -> Result<Self> {
        if short_hypers.len() != long.output_dim() || short_pseudo.ncols() != long.input_dim() {
            return Err(Error::Dimension("short-term GP does not match the long-term GP".into()));
        }
        let short = SparseGp::prior(short_hypers, short_pseudo)?;
        let state = RecursiveState::from_prior(&short, lambda)?;
        Ok(Self { long, short, state })
    }

    /// Short-term GP sharing the long-term hyperparameters and pseudo inputs.
    pub fn from_long(long: SparseGp<T>, lambda: T) -> Result<Self> {
        let hypers = long.hypers().to_vec();
        let z = long.pseudo_inputs().clone();
        Self::new(long, hypers, z, lambda)
    }

    pub(crate) fn from_components(long: SparseGp<T>, short: SparseGp<T>, state: RecursiveState<T>) -> Result<Self> {
        if short.output_dim() != long.output_dim() || short.input_dim() != long.input_dim() {
            return Err(Error::Dimension("short-term GP does not match the long-term GP".into()));
        }
        if state.posterior().num_pseudo() != short.num_pseudo() || state.posterior().output_dim() != short.output_dim() {
            return Err(Error::Dimension("short-term state does not match its pseudo inputs".into()));
        }
        Ok(Self { long, short, state })
    }

    pub fn long(&self) -> &SparseGp<T> {
        &self.long
    }

    pub fn short(&self) -> &SparseGp<T> {
        &self.short
    }

    pub fn state(&self) -> &RecursiveState<T> {
        &self.state
    }

    pub fn lambda(&self) -> T {
        self.state.lambda()
    }

    pub fn input_dim(&self) -> usize {
        self.long.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.long.output_dim()
    }

    /// Replaces `(m_us, S_us)`.
    pub fn set_short_posterior(&mut self, posterior: VariationalPosterior<T>) -> Result<()> {
        let step = self.state.step();
        self.state = RecursiveState::new(posterior, self.state.lambda())?.with_step(step);
        self.short.with_posterior(self.state.posterior().clone()).map(|_| ())
    }

    /// Resets the short-term GP to `(0, V_M)`.
    pub fn reset_short(&mut self) {
        let lambda = self.state.lambda();
        self.state = RecursiveState::from_prior(&self.short, lambda).expect("lambda validated at construction");
    }

    /// Long-term and short-term predictions separately.
    pub fn predict_parts(&self, x: &[T]) -> Result<[(DVector<T>, DVector<T>); 2]> {
        let long = self.long.predict(x)?;
        let short = self.short.predict_with(self.state.posterior(), x)?;
        Ok([long, short])
    }

    /// Sum of the two means and of the two variances.
    pub fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        let [(ml, vl), (ms, vs)] = self.predict_parts(x)?;
        Ok((ml + ms, vl + vs))
    }

    /// Recursive update of the short-term GP on `y - μ_l(x)`.
    pub fn online_update(&mut self, x: &[T], y: &[T]) -> Result<UpdateInfo<T>> {
        if y.len() != self.output_dim() {
            return Err(Error::Dimension(format!("expected {} targets, got {}", self.output_dim(), y.len())));
        }
        let (mu, _) = self.long.predict(x)?;
        let residual: Vec<T> = y.iter().zip(mu.iter()).map(|(a, b)| *a - *b).collect();
        self.state.update(&self.short, x, &residual)
    }
}

pub fn init_dual<T: Real>(
    long: SparseGp<T>,
    short_hypers: Vec<Hyperparameters<T>>,
    short_pseudo: DMatrix<T>,
    lambda: T,
) -> Result<DualGp<T>> {
    DualGp::new(long, short_hypers, short_pseudo, lambda)
}

pub fn predict_dual<T: Real>(dual: &DualGp<T>, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
    dual.predict(x)
}

pub fn online_update_dual<T: Real>(dual: &DualGp<T>, x: &[T], y: &[T]) -> Result<DualGp<T>> {
    let mut next = dual.clone();
    next.online_update(x, y)?;
    Ok(next)
}

/// Batch optimum of the short-term posterior on raw targets `Y`:
///
/// ```text
/// m_us = V_M (V_M + V_MN Q̃⁻¹ V_NM)⁻¹ V_MN Q̃⁻¹ Y,   Q̃ = Q_N + σ² I
/// S_us = V_M (V_M + σ⁻² V_MN V_NM)⁻¹ V_M
/// ```
///
/// `Q_N` uses the long-term kernel and pseudo inputs, `σ²` the short-term noise.
pub fn optimal_short_batch<T: Real>(data: &Dataset<T>, dual: &DualGp<T>) -> Result<VariationalPosterior<T>> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    if data.input_dim() != dual.input_dim() || data.output_dim() != dual.output_dim() {
        return Err(Error::Dimension("dataset does not match the dual GP".into()));
    }
    let long = dual.long();
    let short = dual.short();
    let ms = short.num_pseudo();
    let p = dual.output_dim();
    let x = data.inputs();
    let mut means = DMatrix::zeros(ms, p);
    let mut factors = Vec::with_capacity(p);
    for o in 0..p {
        let hl = &long.hypers()[o];
        let hs = &short.hypers()[o];
        let s2 = hs.noise.variance();
        let y = data.output_column(o);
        let vm = short.km_factor(o);
        let vmn = kernel_matrix(&hs.kernel, short.pseudo_inputs(), x)?;
        let kmn = kernel_matrix(&hl.kernel, long.pseudo_inputs(), x)?;
        let km = long.km_factor(o);

        // Q̃⁻¹ X = σ⁻² X - σ⁻⁴ K_NM P_l⁻¹ K_MN X,  P_l = K_M + σ⁻² K_MN K_NM
        let mut pl = km.reconstruct() + &kmn * kmn.transpose() / s2;
        crate::linalg::symmetrize(&mut pl);
        let pl = Factor::exact_with(&pl, T::zero()).ok_or(Error::Conditioning(f64::INFINITY))?;
        let qinv_apply = |rhs: &DMatrix<T>| -> DMatrix<T> {
            let inner = pl.solve(&(&kmn * rhs));
            rhs / s2 - kmn.tr_mul(&inner) / (s2 * s2)
        };
        let vnm = vmn.transpose();
        let qinv_vnm = qinv_apply(&vnm);
        let qinv_y = qinv_apply(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()));

        let vm_full = vm.reconstruct();
        let mut inner = &vm_full + &vmn * &qinv_vnm;
        crate::linalg::symmetrize(&mut inner);
        let inner = Factor::exact_with(&inner, T::zero()).ok_or(Error::Conditioning(f64::INFINITY))?;
        let rhs = (&vmn * qinv_y).column(0).into_owned();
        means.set_column(o, &(&vm_full * inner.solve_vec(&rhs)));

        // S_us = L_V B⁻¹ L_Vᵀ with B = I + σ⁻² L_V⁻¹ V_MN V_NM L_V⁻ᵀ
        let a = vm.solve_l(&vmn);
        let mut b = &a * a.transpose() / s2;
        for i in 0..ms {
            b[(i, i)] += T::one();
        }
        let lb = Factor::exact_with(&b, T::zero()).ok_or(Error::Conditioning(f64::INFINITY))?;
        factors.push(lb.solve_l(&vm.l.transpose()).transpose());
    }
    Ok(VariationalPosterior {
        means,
        cov_factors: factors,
    })
}

/// Bounded store of past experience used to retrain the long-term GP.
#[derive(Clone, Debug)]
pub struct ExperienceBuffer<T: Real> {
    data: Option<Dataset<T>>,
    target: usize,
    capacity: usize,
}

impl<T: Real> ExperienceBuffer<T> {
    /// Keeps the most recent `5 · target` points and trains on `target` of them.
    pub fn new(target: usize) -> Self {
        Self::with_capacity(target, 5 * target)
    }

    pub fn with_capacity(target: usize, capacity: usize) -> Self {
        Self {
            data: None,
            target: target.max(1),
            capacity: capacity.max(target.max(1)),
        }
    }

    pub fn len(&self) -> usize {
        self.data.as_ref().map_or(0, |d| d.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn extend(&mut self, batch: &Dataset<T>) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let merged = match self.data.take() {
            Some(d) => d.concat(batch)?,
            None => batch.clone(),
        };
        self.data = Some(if merged.len() > self.capacity {
            merged.tail(self.capacity)
        } else {
            merged
        });
        Ok(())
    }

    /// Uniform subsample of the stored points, at most `target` of them.
    pub fn training_set(&self) -> Option<Dataset<T>> {
        self.data.as_ref().map(|d| {
            if d.len() > self.target {
                d.subsample_uniform(self.target)
            } else {
                d.clone()
            }
        })
    }
}

/// Consolidates a mission: stores its data, retrains the long-term GP warm
/// started from its current pseudo inputs and hyperparameters, and resets the
/// short-term GP (which keeps copying the long-term hyperparameters when it
/// was created with [`DualGp::from_long`]-style sharing).
pub fn mission_batch_update<T: Real>(
    dual: &DualGp<T>,
    history: &mut ExperienceBuffer<T>,
    mission: &Dataset<T>,
    cfg: &SparseTrainConfig,
) -> Result<(DualGp<T>, Option<TrainReport<T>>)> {
    if mission.is_empty() {
        let mut next = dual.clone();
        next.reset_short();
        return Ok((next, None));
    }
    history.extend(mission)?;
    let training = history.training_set().expect("buffer holds the mission data");
    let shared = dual.short.hypers() == dual.long.hypers() && dual.short.pseudo_inputs() == dual.long.pseudo_inputs();
    let (long, report) = train_sparse_from(
        &training,
        dual.long.pseudo_inputs().clone(),
        dual.long.hypers().to_vec(),
        cfg,
    )?;
    let next = if shared {
        DualGp::from_long(long, dual.lambda())?
    } else {
        DualGp::new(long, dual.short.hypers().to_vec(), dual.short.pseudo_inputs().clone(), dual.lambda())?
    };
    Ok((next, Some(report)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_sparse::{collapsed_elbo, optimal_variational, train_sparse};
    use crate::kernels::{KernelParams, NoiseParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hyper(sf: f64, l: Vec<f64>, n: f64) -> Hyperparameters<f64> {
        Hyperparameters::new(KernelParams::new(sf, l).unwrap(), NoiseParams::new(n).unwrap())
    }

    fn fitted_long(seed: u64) -> (SparseGp<f64>, Dataset<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(80, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(80, 2, |i, o| (x[(i, 0)] + o as f64).sin() + 0.5 * x[(i, 1)]);
        let data = Dataset::new(x, y).unwrap();
        let z = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-2.0..2.0));
        let h = vec![hyper(1.0, vec![1.0, 1.2], 0.02), hyper(1.5, vec![0.8, 1.0], 0.05)];
        (SparseGp::fit_posterior(&data, z, h).unwrap(), data)
    }

    #[test]
    fn fresh_dual_predicts_long_mean_and_summed_variance() {
        let (long, _) = fitted_long(1);
        let dual = DualGp::from_long(long.clone(), 0.98).unwrap();
        for q in [[0.1, 0.2], [1.5, -1.0], [-3.0, 2.5]] {
            let (m, v) = dual.predict(&q).unwrap();
            let (ml, vl) = long.predict(&q).unwrap();
            assert_eq!(m, ml);
            // S_us = V_M leaves the short-term prior variance v_**
            for o in 0..2 {
                let prior = long.hypers()[o].kernel.signal_variance();
                assert!((v[o] - vl[o] - prior).abs() < 1e-8);
            }
        }
        let far = [50.0, 50.0];
        let (_, v) = dual.predict(&far).unwrap();
        let (_, vl) = long.predict(&far).unwrap();
        assert!((v[0] - vl[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_is_exactly_additive() {
        let (long, data) = fitted_long(2);
        let mut dual = DualGp::from_long(long.clone(), 0.95).unwrap();
        for i in 0..30 {
            let x: Vec<f64> = data.input_row(i).iter().copied().collect();
            dual.online_update(&x, &[0.3, -0.2]).unwrap();
        }
        let short = dual.short().with_posterior(dual.state().posterior().clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
            let (m, v) = dual.predict(&q).unwrap();
            let (ml, vl) = long.predict(&q).unwrap();
            let (ms, vs) = short.predict(&q).unwrap();
            assert!((&m - (ml + ms)).amax() < 1e-12);
            assert!((&v - (vl + vs)).amax() < 1e-12);
            assert!(v.min() >= -1e-8);
        }
    }

    #[test]
    fn zero_residual_and_long_term_untouched() {
        let (long, _) = fitted_long(3);
        let mut dual = DualGp::from_long(long.clone(), 0.98).unwrap();
        let x = [0.4, -0.3];
        let (mu, _) = long.predict(&x).unwrap();
        let before = dual.state().posterior().means.clone();
        dual.online_update(&x, mu.as_slice()).unwrap();
        assert_eq!(dual.state().posterior().means, before);
        for _ in 0..10 {
            dual.online_update(&[0.1, 0.1], &[2.0, 2.0]).unwrap();
        }
        assert_eq!(dual.long().posterior(), long.posterior());
        assert_eq!(dual.long().pseudo_inputs(), long.pseudo_inputs());
        dual.reset_short();
        assert_eq!(dual.predict(&[0.1, 0.1]).unwrap().0, long.predict(&[0.1, 0.1]).unwrap().0);
    }

    #[test]
    fn tracks_constant_offset() {
        let (long, data) = fitted_long(4);
        let mut dual = DualGp::from_long(long.clone(), 0.98).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = [0.5, -0.4];
        let centre = [0.3, 0.2];
        for _ in 0..200 {
            let x = [centre[0] + rng.random_range(-0.2..0.2), centre[1] + rng.random_range(-0.2..0.2)];
            let truth = long.predict(&x).unwrap().0;
            dual.online_update(&x, &[truth[0] + c[0], truth[1] + c[1]]).unwrap();
        }
        let truth = long.predict(&centre).unwrap().0;
        let (m, _) = dual.predict(&centre).unwrap();
        for o in 0..2 {
            let target = truth[o] + c[o];
            assert!((m[o] - target).abs() <= 0.05 * target.abs(), "{o}: {} vs {target}", m[o]);
        }
        let _ = data;
    }

    #[test]
    fn batch_short_posterior_reduces_to_svgp_when_long_is_vacuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DMatrix::<f64>::from_fn(30, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(30, 1, |i, _| x[(i, 0)].cos());
        let data = Dataset::new(x, y).unwrap();
        let z = DMatrix::from_row_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let long = SparseGp::prior(vec![hyper(1e-12, vec![1.0], 0.1)], z.clone()).unwrap();
        let hs = vec![hyper(1.0, vec![0.7], 0.1)];
        let dual = DualGp::new(long, hs.clone(), z.clone(), 1.0).unwrap();
        let batch = optimal_short_batch(&data, &dual).unwrap();
        let svgp = optimal_variational(&data, &z, &hs).unwrap();
        assert!((&batch.means - &svgp.means).amax() < 1e-6);
        assert!((batch.covariance(0) - svgp.covariance(0)).amax() < 1e-6);
    }

    #[test]
    fn batch_short_posterior_scalar_instance() {
        // N = 3, M = 1 for both memories
        let x = DMatrix::from_row_slice(3, 1, &[-0.5, 0.2, 0.9]);
        let yv = [0.4, -0.1, 0.3];
        let data = Dataset::new(x.clone(), DMatrix::from_row_slice(3, 1, &yv)).unwrap();
        let zl = DMatrix::from_row_slice(1, 1, &[0.1]);
        let zs = DMatrix::from_row_slice(1, 1, &[0.5]);
        let (kf, kl) = (0.8, 0.9);
        let (vf, vl, s2) = (0.6, 0.5, 0.2);
        let long = SparseGp::prior(vec![hyper(kf, vec![kl], 0.3)], zl).unwrap();
        let dual = DualGp::new(long, vec![hyper(vf, vec![vl], s2)], zs, 1.0).unwrap();
        let got = optimal_short_batch(&data, &dual).unwrap();

        let se = |sf: f64, l: f64, a: f64, b: f64| sf * (-0.5 * ((a - b) / l).powi(2)).exp();
        let km = kf * (1.0 + crate::linalg::JITTER);
        let vm = vf * (1.0 + crate::linalg::JITTER);
        let kvec: Vec<f64> = (0..3).map(|i| se(kf, kl, 0.1, x[(i, 0)])).collect();
        let vvec: Vec<f64> = (0..3).map(|i| se(vf, vl, 0.5, x[(i, 0)])).collect();
        let mut qt = DMatrix::from_fn(3, 3, |i, j| kvec[i] * kvec[j] / km);
        for i in 0..3 {
            qt[(i, i)] += s2;
        }
        let qinv = qt.try_inverse().unwrap();
        let v = DVector::from_vec(vvec.clone());
        let yy = DVector::from_vec(yv.to_vec());
        let vqv = (v.transpose() * &qinv * &v)[(0, 0)];
        let vqy = (v.transpose() * &qinv * &yy)[(0, 0)];
        let m = vm / (vm + vqv) * vqy;
        let s = vm * vm / (vm + v.norm_squared() / s2);
        assert!((got.means[(0, 0)] - m).abs() < 1e-12);
        assert!((got.covariance(0)[(0, 0)] - s).abs() < 1e-12);
    }

    #[test]
    fn zero_targets_give_zero_short_mean() {
        let (long, data) = fitted_long(7);
        let dual = DualGp::from_long(long, 0.98).unwrap();
        let zero = Dataset::new(data.inputs().clone(), DMatrix::zeros(data.len(), 2)).unwrap();
        let q = optimal_short_batch(&zero, &dual).unwrap();
        assert!(q.means.amax() == 0.0);
        let mut dual = dual;
        dual.set_short_posterior(q).unwrap();
        assert!(dual.predict(&[0.0, 0.0]).unwrap().0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn online_adaptation_beats_frozen_model_after_step_change() {
        let (long, _) = fitted_long(8);
        let mut adaptive = DualGp::from_long(long.clone(), 0.98).unwrap();
        let frozen = adaptive.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut err_a, mut err_f) = (0.0, 0.0);
        for _ in 0..50 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let truth = long.predict(&x).unwrap().0.add_scalar(0.7);
            err_a += (adaptive.predict(&x).unwrap().0 - &truth).norm();
            err_f += (frozen.predict(&x).unwrap().0 - &truth).norm();
            adaptive.online_update(&x, truth.as_slice()).unwrap();
        }
        assert!(err_a < err_f);
    }

    #[test]
    fn buffer_caps_and_subsamples() {
        let mut buf = ExperienceBuffer::<f64>::new(10);
        assert!(buf.training_set().is_none());
        for k in 0..8 {
            let x = DMatrix::from_fn(10, 1, |i, _| (k * 10 + i) as f64);
            buf.extend(&Dataset::new(x.clone(), x).unwrap()).unwrap();
        }
        assert_eq!(buf.len(), 50);
        let t = buf.training_set().unwrap();
        assert_eq!(t.len(), 10);
        // most recent 50 points are 30..80
        assert!(t.inputs().min() >= 30.0);
    }

    #[test]
    fn mission_update_warm_starts_and_resets_short() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::<f64>::from_fn(120, 1, |_, _| rng.random_range(-3.0..3.0));
        let y = DMatrix::from_fn(120, 1, |i, _| x[(i, 0)].sin());
        let data = Dataset::new(x, y).unwrap();
        let cfg = SparseTrainConfig {
            max_steps: 40,
            ..Default::default()
        };
        let (long, _) = train_sparse(&data, 6, None, &cfg).unwrap();
        let before = collapsed_elbo(&data, long.pseudo_inputs(), long.hypers()).unwrap();
        let mut dual = DualGp::from_long(long, 0.98).unwrap();
        dual.online_update(&[0.5], &[3.0]).unwrap();

        let mut history = ExperienceBuffer::new(data.len());
        let (next, report) = mission_batch_update(&dual, &mut history, &data, &cfg).unwrap();
        let after = collapsed_elbo(&data, next.long().pseudo_inputs(), next.long().hypers()).unwrap();
        assert!(after >= before - 1e-9);
        assert!(report.is_some());
        assert_eq!(next.state().posterior().means.amax(), 0.0);

        let empty = Dataset::empty(1, 1);
        let (same, report) = mission_batch_update(&dual, &mut history, &empty, &cfg).unwrap();
        assert!(report.is_none());
        assert_eq!(same.long().posterior(), dual.long().posterior());
        assert_eq!(same.state().posterior().means.amax(), 0.0);
    }
}
