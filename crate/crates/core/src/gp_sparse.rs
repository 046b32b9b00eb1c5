//! Sparse variational GP: optimal `q(u) = N(m_u, S_u)`, the collapsed evidence
//! lower bound with analytic gradients, training of pseudo inputs and
//! hyperparameters, and prediction.
//!
//! Pseudo inputs `Z` are shared by all output dimensions; every output owns its
//! hyperparameters and its `(m_u, S_u)`. Covariances are kept as square-root
//! factors `S_u = C Cᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{kernel_matrix, kernel_matrix_sym, kernel_vector, Hyperparameters};
use crate::linalg::Factor;
use crate::optim::{maximize_blocks, AscentConfig};
use crate::scalar::{lit, to_f64, Real};

/// Minimum separation between two pseudo inputs.
pub const MIN_PSEUDO_SEPARATION: f64 = 1e-6;

/// `q(u)` for every output: means `M×p`, covariance factors `S_u = C Cᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalPosterior<T: Real> {
    pub means: DMatrix<T>,
    pub cov_factors: Vec<DMatrix<T>>,
}

impl<T: Real> VariationalPosterior<T> {
    pub fn num_pseudo(&self) -> usize {
        self.means.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.means.ncols()
    }

    /// `S_u` of output `o`.
    pub fn covariance(&self, o: usize) -> DMatrix<T> {
        let c = &self.cov_factors[o];
        c * c.transpose()
    }

    fn check(&self, m: usize, p: usize) -> Result<()> {
        if self.means.shape() != (m, p)
            || self.cov_factors.len() != p
            || self.cov_factors.iter().any(|c| c.shape() != (m, m))
        {
            return Err(Error::Dimension(format!(
                "posterior shapes do not match M={m}, p={p}"
            )));
        }
        if !self.means.iter().chain(self.cov_factors.iter().flat_map(|c| c.iter())).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("variational posterior"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SparseGp<T: Real> {
    hypers: Vec<Hyperparameters<T>>,
    pseudo_inputs: DMatrix<T>,
    posterior: VariationalPosterior<T>,
    km: Vec<Factor<T>>,
    /// `K_M⁻¹ m_u`, one column per output.
    weights: DMatrix<T>,
}

fn check_pseudo_inputs<T: Real>(z: &DMatrix<T>) -> Result<()> {
    if z.nrows() == 0 {
        return Err(Error::DegeneratePseudoInputs("need at least one pseudo input".into()));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("pseudo inputs"));
    }
    let sep: T = lit(MIN_PSEUDO_SEPARATION);
    for i in 0..z.nrows() {
        for j in (i + 1)..z.nrows() {
            if (z.row(i) - z.row(j)).norm() <= sep {
                return Err(Error::DegeneratePseudoInputs(format!(
                    "pseudo inputs {i} and {j} coincide"
                )));
            }
        }
    }
    Ok(())
}

fn km_factor<T: Real>(hyper: &Hyperparameters<T>, z: &DMatrix<T>) -> Result<Factor<T>> {
    let kmm = kernel_matrix_sym(&hyper.kernel, z)?;
    Factor::with_jitter(&kmm, hyper.kernel.signal_variance(), "K_M").map_err(|e| match e {
        Error::Singular { jitter, .. } => {
            Error::DegeneratePseudoInputs(format!("K_M singular after jitter {jitter:e}"))
        }
        other => other,
    })
}

impl<T: Real> SparseGp<T> {
    pub fn from_parts(
        hypers: Vec<Hyperparameters<T>>,
        pseudo_inputs: DMatrix<T>,
        posterior: VariationalPosterior<T>,
    ) -> Result<Self> {
        check_pseudo_inputs(&pseudo_inputs)?;
        let (m, d) = pseudo_inputs.shape();
        if hypers.is_empty() {
            return Err(Error::Dimension("sparse GP needs at least one output".into()));
        }
        if hypers.iter().any(|h| h.kernel.input_dim() != d) {
            return Err(Error::Dimension("kernel dimension differs from pseudo inputs".into()));
        }
        posterior.check(m, hypers.len())?;
        let km = hypers
            .iter()
            .map(|h| km_factor(h, &pseudo_inputs))
            .collect::<Result<Vec<_>>>()?;
        let weights = weights_for(&km, &posterior.means);
        Ok(Self {
            hypers,
            pseudo_inputs,
            posterior,
            km,
            weights,
        })
    }

    /// Zero-mean GP at its prior: `m_u = 0`, `S_u = K_M`.
    pub fn prior(hypers: Vec<Hyperparameters<T>>, pseudo_inputs: DMatrix<T>) -> Result<Self> {
        let m = pseudo_inputs.nrows();
        let p = hypers.len();
        let km = hypers
            .iter()
            .map(|h| km_factor(h, &pseudo_inputs))
            .collect::<Result<Vec<_>>>()?;
        let posterior = VariationalPosterior {
            means: DMatrix::zeros(m, p),
            cov_factors: km.iter().map(|f| f.l.clone()).collect(),
        };
        Self::from_parts(hypers, pseudo_inputs, posterior)
    }

    /// Pseudo inputs and hyperparameters fixed, optimal posterior for `data`.
    pub fn fit_posterior(data: &Dataset<T>, pseudo_inputs: DMatrix<T>, hypers: Vec<Hyperparameters<T>>) -> Result<Self> {
        let posterior = optimal_variational(data, &pseudo_inputs, &hypers)?;
        Self::from_parts(hypers, pseudo_inputs, posterior)
    }

    pub fn hypers(&self) -> &[Hyperparameters<T>] {
        &self.hypers
    }

    pub fn pseudo_inputs(&self) -> &DMatrix<T> {
        &self.pseudo_inputs
    }

    pub fn posterior(&self) -> &VariationalPosterior<T> {
        &self.posterior
    }

    pub fn num_pseudo(&self) -> usize {
        self.pseudo_inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.pseudo_inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.hypers.len()
    }

    /// Cholesky factor of `K_M` (jitter included) for output `o`.
    pub fn km_factor(&self, o: usize) -> &Factor<T> {
        &self.km[o]
    }

    /// Same model with a different `q(u)`.
    pub fn with_posterior(&self, posterior: VariationalPosterior<T>) -> Result<Self> {
        posterior.check(self.num_pseudo(), self.output_dim())?;
        let weights = weights_for(&self.km, &posterior.means);
        Ok(Self {
            hypers: self.hypers.clone(),
            pseudo_inputs: self.pseudo_inputs.clone(),
            posterior,
            km: self.km.clone(),
            weights,
        })
    }

    /// Prior posterior `(0, K_M)` on this model's pseudo inputs.
    pub fn prior_posterior(&self) -> VariationalPosterior<T> {
        VariationalPosterior {
            means: DMatrix::zeros(self.num_pseudo(), self.output_dim()),
            cov_factors: self.km.iter().map(|f| f.l.clone()).collect(),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "expected input of dimension {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("prediction input"));
        }
        Ok(())
    }

    /// Weight-space basis `Φ = K_xM K_M⁻¹` of output `o` at `x`.
    pub fn basis_row(&self, x: &[T], o: usize) -> Result<DVector<T>> {
        self.check_input(x)?;
        let k = kernel_vector(&self.hypers[o].kernel, &self.pseudo_inputs, x)?;
        Ok(self.km[o].solve_vec(&k))
    }

    /// Marginal mean `K_*M K_M⁻¹ m_u` and variance
    /// `k_** - K_*M (K_M⁻¹ - K_M⁻¹ S_u K_M⁻¹) K_M*` per output.
    pub fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        self.predict_impl(x, &self.posterior, Some(&self.weights))
    }

    /// Prediction under another `q(u)` on the same pseudo inputs.
    pub fn predict_with(&self, posterior: &VariationalPosterior<T>, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        posterior.check(self.num_pseudo(), self.output_dim())?;
        self.predict_impl(x, posterior, None)
    }

    fn predict_impl(
        &self,
        x: &[T],
        posterior: &VariationalPosterior<T>,
        weights: Option<&DMatrix<T>>,
    ) -> Result<(DVector<T>, DVector<T>)> {
        self.check_input(x)?;
        let p = self.output_dim();
        let mut mean = DVector::zeros(p);
        let mut var = DVector::zeros(p);
        for o in 0..p {
            let h = &self.hypers[o];
            let k = kernel_vector(&h.kernel, &self.pseudo_inputs, x)?;
            let phi = self.km[o].solve_vec(&k);
            mean[o] = match weights {
                Some(w) => k.dot(&w.column(o)),
                None => phi.dot(&posterior.means.column(o)),
            };
            let sphi = posterior.cov_factors[o].tr_mul(&phi);
            var[o] = h.kernel.signal_variance() - phi.dot(&k) + sphi.norm_squared();
        }
        Ok((mean, var))
    }
}

fn weights_for<T: Real>(km: &[Factor<T>], means: &DMatrix<T>) -> DMatrix<T> {
    let mut w = DMatrix::zeros(means.nrows(), means.ncols());
    for (o, f) in km.iter().enumerate() {
        w.set_column(o, &f.solve_vec(&means.column(o).into_owned()));
    }
    w
}

fn check_inputs<T: Real>(data: &Dataset<T>, z: &DMatrix<T>, hypers: &[Hyperparameters<T>]) -> Result<()> {
    if hypers.len() != data.output_dim() {
        return Err(Error::Dimension(format!(
            "{} hyperparameter sets for {} outputs",
            hypers.len(),
            data.output_dim()
        )));
    }
    if z.ncols() != data.input_dim() || hypers.iter().any(|h| h.kernel.input_dim() != data.input_dim()) {
        return Err(Error::Dimension("pseudo inputs / kernel dimension differ from data".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    Ok(())
}

/// Shared per-output quantities of the collapsed bound.
struct Collapsed<T: Real> {
    km: Factor<T>,
    kmn: DMatrix<T>,
    /// `A = L⁻¹ K_MN / σ`
    a: DMatrix<T>,
    aat: DMatrix<T>,
    /// Factor of `B = I + A Aᵀ`
    lb: Factor<T>,
    /// `c = L_B⁻¹ A y / σ`
    c: DVector<T>,
}

fn collapsed<T: Real>(x: &DMatrix<T>, y: &DVector<T>, z: &DMatrix<T>, h: &Hyperparameters<T>) -> Result<Collapsed<T>> {
    let km = km_factor(h, z)?;
    let kmn = kernel_matrix(&h.kernel, z, x)?;
    let sigma = h.noise.variance().sqrt();
    let a = km.solve_l(&kmn) / sigma;
    let aat = &a * a.transpose();
    let mut b = aat.clone();
    for i in 0..b.nrows() {
        b[(i, i)] += T::one();
    }
    let lb = Factor::exact_with(&b, T::zero()).ok_or(Error::Singular {
        context: "I + A Aᵀ",
        jitter: 0.0,
    })?;
    let c = lb.solve_l_vec(&(&a * y)) / sigma;
    Ok(Collapsed { km, kmn, a, aat, lb, c })
}

/// Optimal `q(u)`: `S_u = K_M (K_M + σ⁻² K_MN K_NM)⁻¹ K_M`, `m_u = σ⁻² S_u K_M⁻¹ K_MN y`.
pub fn optimal_variational<T: Real>(
    data: &Dataset<T>,
    z: &DMatrix<T>,
    hypers: &[Hyperparameters<T>],
) -> Result<VariationalPosterior<T>> {
    check_inputs(data, z, hypers)?;
    let m = z.nrows();
    let p = hypers.len();
    let mut means = DMatrix::zeros(m, p);
    let mut cov_factors = Vec::with_capacity(p);
    for (o, h) in hypers.iter().enumerate() {
        let y = data.output_column(o);
        let col = collapsed(data.inputs(), &y, z, h)?;
        // K_M P⁻¹ = L B⁻¹ L⁻¹ with P = L B Lᵀ
        let sigma = h.noise.variance().sqrt();
        let mean = &col.km.l * col.lb.solve_vec(&(&col.a * &y)) / sigma;
        means.set_column(o, &mean);
        // S_u = L B⁻¹ Lᵀ = (L L_B⁻ᵀ)(L L_B⁻ᵀ)ᵀ
        let factor = col.lb.solve_l(&col.km.l.transpose()).transpose();
        cov_factors.push(factor);
    }
    Ok(VariationalPosterior { means, cov_factors })
}

fn elbo_value<T: Real>(col: &Collapsed<T>, y: &DVector<T>, h: &Hyperparameters<T>) -> T {
    let n: T = lit(y.len() as f64);
    let s = h.noise.variance();
    let half: T = lit(0.5);
    let log_2pi: T = lit((2.0 * std::f64::consts::PI).ln());
    -half * n * log_2pi - half * col.lb.log_det() - half * n * s.ln() - half * y.norm_squared() / s
        + half * col.c.norm_squared()
        - half * n * h.kernel.signal_variance() / s
        + half * col.aat.trace()
}

/// `log N(Y | 0, Q_N + σ_ε² I) - tr(K_N - Q_N) / (2σ_ε²)` summed over outputs,
/// with `Q_N = K_NM K_M⁻¹ K_MN`.
pub fn collapsed_elbo<T: Real>(data: &Dataset<T>, z: &DMatrix<T>, hypers: &[Hyperparameters<T>]) -> Result<T> {
    check_inputs(data, z, hypers)?;
    let mut total = T::zero();
    for (o, h) in hypers.iter().enumerate() {
        let y = data.output_column(o);
        let col = collapsed(data.inputs(), &y, z, h)?;
        total += elbo_value(&col, &y, h);
    }
    Ok(total)
}

/// Collapsed bound and its gradients.
#[derive(Clone, Debug)]
pub struct ElboGradient<T: Real> {
    pub value: T,
    /// Per output, w.r.t. `[log σ_f², log ℓ_1..d, log σ_ε²]`.
    pub hypers: Vec<DVector<T>>,
    /// W.r.t. every pseudo-input coordinate, `M×d`.
    pub pseudo_inputs: DMatrix<T>,
}

fn elbo_output_gradient<T: Real>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    z: &DMatrix<T>,
    h: &Hyperparameters<T>,
    zgrad: &mut DMatrix<T>,
) -> Result<(T, DVector<T>)> {
    let col = collapsed(x, y, z, h)?;
    let value = elbo_value(&col, y, h);
    let (m, d) = z.shape();
    let n = x.nrows();
    let half: T = lit(0.5);
    let two: T = lit(2.0);
    let s = h.noise.variance();
    let sf = h.kernel.signal_variance();

    let linv = col.km.solve_l(&DMatrix::identity(m, m));
    let kinv = linv.tr_mul(&linv);
    let binv = col.lb.inverse();
    let pinv = linv.tr_mul(&(&binv * &linv));
    let beta = col.km.solve_lt_vec(&col.lb.solve_lt_vec(&col.c));
    let ltaatl = linv.tr_mul(&(&col.aat * &linv));
    let bbt = &beta * beta.transpose();

    let g_km = (&kinv - &pinv - &bbt - &ltaatl) * half;
    let core = &kinv - &pinv - &bbt;
    let g_kmn = (&core * &col.kmn + &beta * y.transpose()) / s;

    // noise variance
    let nf: T = lit(n as f64);
    let knb = col.kmn.tr_mul(&beta);
    let tr_pinv_psi = s * (lit::<T>(m as f64) - binv.trace());
    let tr_kinv_psi = s * col.aat.trace();
    let d_s = half / (s * s) * (tr_pinv_psi + y.norm_squared() + nf * sf - tr_kinv_psi + knb.norm_squared())
        - half * nf / s
        - y.dot(&knb) / (s * s);

    let kmm = kernel_matrix_sym(&h.kernel, z)?;
    let e_m = g_km.component_mul(&kmm);
    let e_n = g_kmn.component_mul(&col.kmn);

    let mut grad = DVector::zeros(d + 2);
    grad[0] = e_m.sum() + col.km.jitter * g_km.trace() + e_n.sum() - half * nf * sf / s;
    for j in 0..d {
        let l = h.kernel.length_scales()[j];
        let l2 = l * l;
        let mut acc = T::zero();
        for a in 0..m {
            let za = z[(a, j)];
            for b in 0..m {
                let diff = za - z[(b, j)];
                let e = e_m[(b, a)];
                acc += e * diff * diff;
                zgrad[(a, j)] -= two * e * diff / l2;
            }
        }
        for t in 0..n {
            let xt = x[(t, j)];
            for a in 0..m {
                let diff = z[(a, j)] - xt;
                let e = e_n[(a, t)];
                acc += e * diff * diff;
                zgrad[(a, j)] -= e * diff / l2;
            }
        }
        grad[j + 1] = acc / l2;
    }
    grad[d + 1] = s * d_s;
    Ok((value, grad))
}

/// Collapsed bound with gradients w.r.t. log-hyperparameters and pseudo inputs.
pub fn elbo_with_gradient<T: Real>(
    data: &Dataset<T>,
    z: &DMatrix<T>,
    hypers: &[Hyperparameters<T>],
) -> Result<ElboGradient<T>> {
    check_inputs(data, z, hypers)?;
    let mut zgrad = DMatrix::zeros(z.nrows(), z.ncols());
    let mut value = T::zero();
    let mut hgrads = Vec::with_capacity(hypers.len());
    for (o, h) in hypers.iter().enumerate() {
        let (v, g) = elbo_output_gradient(data.inputs(), &data.output_column(o), z, h, &mut zgrad)?;
        value += v;
        hgrads.push(g);
    }
    Ok(ElboGradient {
        value,
        hypers: hgrads,
        pseudo_inputs: zgrad,
    })
}

/// Seeded k-means++ centroids of the (column-standardized) inputs, returned in
/// original units.
pub fn kmeans_pseudo_inputs<T: Real>(inputs: &DMatrix<T>, m: usize, iters: usize, seed: u64) -> Result<DMatrix<T>> {
    let (n, d) = inputs.shape();
    if m == 0 || m > n {
        return Err(Error::InvalidParameter(format!("cannot pick {m} pseudo inputs from {n} samples")));
    }
    let x: DMatrix<f64> = inputs.map(|v| to_f64(v));
    let mut scale = vec![1.0; d];
    for (j, s) in scale.iter_mut().enumerate() {
        let col = x.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        if sd > 1e-12 {
            *s = sd;
        }
    }
    let xs = DMatrix::from_fn(n, d, |i, j| x[(i, j)] / scale[j]);
    let dist2 = |i: usize, c: &DMatrix<f64>, k: usize| -> f64 {
        (0..d).map(|j| (xs[(i, j)] - c[(k, j)]).powi(2)).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = DMatrix::<f64>::zeros(m, d);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.set_row(0, &xs.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, &centers, 0)).collect();
    for k in 1..m {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            (0..n).find(|i| !chosen[*i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centers.set_row(k, &xs.row(pick));
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(dist2(i, &centers, k));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..m)
                .map(|k| (k, dist2(i, &centers, k)))
                .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
                .0;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = DMatrix::<f64>::zeros(m, d);
        let mut counts = vec![0usize; m];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for j in 0..d {
                sums[(a, j)] += xs[(i, j)];
            }
        }
        for k in 0..m {
            if counts[k] > 0 {
                for j in 0..d {
                    centers[(k, j)] = sums[(k, j)] / counts[k] as f64;
                }
            } else {
                // re-seed an empty cluster at the worst-served sample
                let far = (0..n)
                    .map(|i| (i, dist2(i, &centers, assign[i])))
                    .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b })
                    .0;
                centers.set_row(k, &xs.row(far));
                assign[far] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(DMatrix::from_fn(m, d, |k, j| lit(centers[(k, j)] * scale[j])))
}

#[derive(Clone, Debug)]
pub struct SparseTrainConfig {
    /// Total optimizer steps (hyperparameter and pseudo-input steps combined).
    pub max_steps: usize,
    pub optimize_hypers: bool,
    pub optimize_pseudo_inputs: bool,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub rel_tol: f64,
    /// Input dimensions whose length scales are held at their initial values.
    pub fixed_length_scales: Vec<usize>,
    /// Hold the signal variances at their initial values.
    pub fixed_signal_variance: bool,
}

impl Default for SparseTrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 500,
            optimize_hypers: true,
            optimize_pseudo_inputs: true,
            kmeans_iters: 25,
            seed: 0,
            rel_tol: 1e-9,
            fixed_length_scales: Vec::new(),
            fixed_signal_variance: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub initial_elbo: T,
    pub final_elbo: T,
    /// Bound after initialization and after every accepted step.
    pub trace: Vec<T>,
    pub steps: usize,
}

/// k-means initialization of `m` pseudo inputs, data-driven hyperparameters
/// (unless `init` is given), then [`train_sparse_from`].
pub fn train_sparse<T: Real>(
    data: &Dataset<T>,
    m: usize,
    init: Option<&[Hyperparameters<T>]>,
    cfg: &SparseTrainConfig,
) -> Result<(SparseGp<T>, TrainReport<T>)> {
    if m == 0 || data.len() < m {
        return Err(Error::InvalidParameter(format!(
            "need N >= M >= 1, got N={} M={m}",
            data.len()
        )));
    }
    let z0 = kmeans_pseudo_inputs(data.inputs(), m, cfg.kmeans_iters, cfg.seed)?;
    let hypers0 = match init {
        Some(h) if h.len() == data.output_dim() => h.to_vec(),
        Some(h) if h.len() == 1 => vec![h[0].clone(); data.output_dim()],
        Some(_) => return Err(Error::Dimension("initial hyperparameters do not match outputs".into())),
        None => (0..data.output_dim())
            .map(|o| Hyperparameters::from_data(data.inputs(), data.outputs().column(o).iter().copied()))
            .collect::<Result<Vec<_>>>()?,
    };
    train_sparse_from(data, z0, hypers0, cfg)
}

/// Maximizes the collapsed bound from the given pseudo inputs and
/// hyperparameters, alternating hyperparameter and pseudo-input steps, and
/// returns the model with its optimal posterior.
pub fn train_sparse_from<T: Real>(
    data: &Dataset<T>,
    z0: DMatrix<T>,
    hypers0: Vec<Hyperparameters<T>>,
    cfg: &SparseTrainConfig,
) -> Result<(SparseGp<T>, TrainReport<T>)> {
    check_inputs(data, &z0, &hypers0)?;
    check_pseudo_inputs(&z0)?;
    let p = hypers0.len();
    let (m, d) = z0.shape();
    if cfg.fixed_length_scales.iter().any(|&j| j >= d) {
        return Err(Error::Dimension(format!("fixed length-scale index out of range for {d} inputs")));
    }
    let nh = d + 2;
    let mut x0 = DVector::zeros(p * nh + m * d);
    for (o, h) in hypers0.iter().enumerate() {
        for (i, v) in h.to_log().into_iter().enumerate() {
            x0[o * nh + i] = v;
        }
    }
    for a in 0..m {
        for j in 0..d {
            x0[p * nh + a * d + j] = z0[(a, j)];
        }
    }
    let unpack = |x: &DVector<T>| -> Result<(Vec<Hyperparameters<T>>, DMatrix<T>)> {
        let hypers = (0..p)
            .map(|o| Hyperparameters::from_log(&x.as_slice()[o * nh..(o + 1) * nh]))
            .collect::<Result<Vec<_>>>()?;
        let z = DMatrix::from_fn(m, d, |a, j| x[p * nh + a * d + j]);
        Ok((hypers, z))
    };
    let mut blocks = Vec::new();
    if cfg.optimize_hypers {
        blocks.push(0..p * nh);
    }
    if cfg.optimize_pseudo_inputs {
        blocks.push(p * nh..p * nh + m * d);
    }
    let ascent = AscentConfig {
        max_steps: cfg.max_steps,
        rel_tol: cfg.rel_tol,
        max_coord_step: 1.0,
    };
    let result = maximize_blocks(x0, &blocks, &ascent, |x| {
        let (hypers, z) = unpack(x)?;
        let g = elbo_with_gradient(data, &z, &hypers)?;
        let mut grad = DVector::zeros(x.len());
        for (o, hg) in g.hypers.iter().enumerate() {
            grad.rows_mut(o * nh, nh).copy_from(hg);
            for &j in &cfg.fixed_length_scales {
                grad[o * nh + 1 + j] = T::zero();
            }
            if cfg.fixed_signal_variance {
                grad[o * nh] = T::zero();
            }
        }
        for a in 0..m {
            for j in 0..d {
                grad[p * nh + a * d + j] = g.pseudo_inputs[(a, j)];
            }
        }
        Ok((g.value, grad))
    })?;
    let (hypers, z) = unpack(&result.x)?;
    let gp = SparseGp::fit_posterior(data, z, hypers)?;
    let report = TrainReport {
        initial_elbo: result.trace[0],
        final_elbo: result.value,
        trace: result.trace,
        steps: result.steps,
    };
    Ok((gp, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_full::{log_marginal_likelihood, FullGp};
    use crate::kernels::{KernelParams, NoiseParams};
    use crate::linalg::{min_eigenvalue, JITTER};

    fn hyper(sf: f64, ls: Vec<f64>, noise: f64) -> Hyperparameters<f64> {
        Hyperparameters::new(KernelParams::new(sf, ls).unwrap(), NoiseParams::new(noise).unwrap())
    }

    fn sine_data(n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::<f64>::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let y = DMatrix::from_fn(n, 1, |i, _| x[(i, 0)].sin() + 0.05 * rng.random_range(-1.0..1.0));
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn zero_targets_give_zero_mean_and_prior_shaped_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
        let data = Dataset::new(x.clone(), DMatrix::zeros(12, 1)).unwrap();
        let z = x.rows(0, 4).into_owned();
        let h = hyper(1.2, vec![0.7, 0.9], 0.1);
        let q = optimal_variational(&data, &z, std::slice::from_ref(&h)).unwrap();
        assert!(q.means.iter().all(|v| *v == 0.0));
        // S_u = K_M (K_M + σ⁻² K_MN K_NM)⁻¹ K_M
        let mut km = kernel_matrix(&h.kernel, &z, &z).unwrap();
        for i in 0..4 {
            km[(i, i)] += JITTER * 1.2;
        }
        let kmn = kernel_matrix(&h.kernel, &z, &x).unwrap();
        let inner = &km + &kmn * kmn.transpose() / 0.1;
        let expected = &km * inner.try_inverse().unwrap() * &km;
        assert!((q.covariance(0) - expected).abs().max() < 1e-10);
        assert!(min_eigenvalue(&q.covariance(0)) >= -1e-8);
    }

    #[test]
    fn scalar_instance_matches_hand_algebra() {
        // N = 2, M = 1
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DMatrix::from_row_slice(2, 1, &[0.5, -0.3]);
        let data = Dataset::new(x, y).unwrap();
        let z = DMatrix::from_row_slice(1, 1, &[0.4]);
        let (sf, l, s2) = (1.5, 0.8, 0.2);
        let h = hyper(sf, vec![l], s2);
        let q = optimal_variational(&data, &z, std::slice::from_ref(&h)).unwrap();
        let km = sf * (1.0 + JITTER);
        let k1 = sf * (-0.5 * (0.4f64 / l).powi(2)).exp();
        let k2 = sf * (-0.5 * (0.6f64 / l).powi(2)).exp();
        let s_u = km * km / (km + (k1 * k1 + k2 * k2) / s2);
        let m_u = s_u / km * (k1 * 0.5 + k2 * -0.3) / s2;
        assert!((q.covariance(0)[(0, 0)] - s_u).abs() < 1e-12);
        assert!((q.means[(0, 0)] - m_u).abs() < 1e-12);

        // collapsed bound by hand: Q_N = k kᵀ / K_M
        let kv = DVector::from_vec(vec![k1, k2]);
        let qn = &kv * kv.transpose() / km;
        let cov = &qn + DMatrix::identity(2, 2) * s2;
        let yv = DVector::from_vec(vec![0.5, -0.3]);
        let quad = (yv.transpose() * cov.clone().try_inverse().unwrap() * &yv)[(0, 0)];
        let expected = -0.5 * quad - 0.5 * cov.determinant().ln() - (2.0 * std::f64::consts::PI).ln()
            - (2.0 * sf - qn.trace()) / (2.0 * s2);
        let got = collapsed_elbo(&data, &z, &[h]).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn pseudo_inputs_at_data_recover_full_gp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::<f64>::from_fn(30, 2, |_, _| rng.random_range(-3.0..3.0));
        let y = DMatrix::from_fn(30, 1, |i, _| x[(i, 0)].sin() * x[(i, 1)].cos());
        let data = Dataset::new(x, y).unwrap();
        let h = vec![hyper(0.9, vec![0.8, 1.1], 0.05)];
        let sparse = SparseGp::fit_posterior(&data, data.inputs().clone(), h.clone()).unwrap();
        let full = FullGp::new(data.clone(), h.clone()).unwrap();
        for i in 0..40 {
            let q = [-4.0 + i as f64 * 0.2, 3.5 - i as f64 * 0.17];
            let (ms, vs) = sparse.predict(&q).unwrap();
            let (mf, vf) = full.predict(&q).unwrap();
            assert!((ms[0] - mf[0]).abs() < 1e-6, "{q:?}: {} vs {}", ms[0], mf[0]);
            assert!((vs[0] - vf[0]).abs() < 1e-6, "{q:?}: {} vs {}", vs[0], vf[0]);
        }
        let elbo = collapsed_elbo(&data, data.inputs(), &h).unwrap();
        let lml = log_marginal_likelihood(&data, &h).unwrap();
        // jitter on K_M leaves tr(K_N - Q_N) ≈ N·jitter
        let bias = 30.0 * JITTER * 0.9 / 0.05;
        assert!((elbo - lml).abs() < 1e-8 + bias, "{elbo} {lml}");
    }

    #[test]
    fn bound_holds_for_subsets() {
        let data = sine_data(20, 3);
        let h = vec![hyper(0.9, vec![0.6], 0.05)];
        let lml = log_marginal_likelihood(&data, &h).unwrap();
        for m in [1usize, 3, 5, 10] {
            let rows: Vec<usize> = (0..m).map(|i| i * 2).collect();
            let z = data.inputs().select_rows(&rows);
            let elbo = collapsed_elbo(&data, &z, &h).unwrap();
            assert!(elbo <= lml + 1e-6);
        }
    }

    #[test]
    fn zero_mean_predicts_zero_and_far_points_revert() {
        let h = vec![hyper(1.3, vec![0.5, 0.5], 0.1)];
        let z = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let gp = SparseGp::prior(h, z).unwrap();
        let (m, v) = gp.predict(&[0.3, 0.4]).unwrap();
        assert_eq!(m[0], 0.0);
        assert!(v[0] >= -1e-8);
        let (m, v) = gp.predict(&[50.0, 50.0]).unwrap();
        assert_eq!(m[0], 0.0);
        assert!((v[0] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn basis_row_reproduces_predictive_mean() {
        let data = sine_data(30, 5);
        let z = DMatrix::from_row_slice(4, 1, &[-2.0, -0.5, 0.7, 2.2]);
        let gp = SparseGp::fit_posterior(&data, z, vec![hyper(1.0, vec![0.7], 0.02)]).unwrap();
        for q in [-2.5, -1.0, 0.1, 1.9] {
            let phi = gp.basis_row(&[q], 0).unwrap();
            let lhs = phi.dot(&gp.posterior().means.column(0));
            assert!((lhs - gp.predict(&[q]).unwrap().0[0]).abs() < 1e-10);
        }
        let phi = gp.basis_row(&[0.7], 0).unwrap();
        assert!((phi[2] - 1.0).abs() < 1e-6);
        assert!(phi[0].abs() < 1e-6 && phi[1].abs() < 1e-6 && phi[3].abs() < 1e-6);
        assert!(gp.basis_row(&[100.0], 0).unwrap().amax() < 1e-12);
    }

    #[test]
    fn coincident_pseudo_inputs_are_rejected() {
        let z = DMatrix::from_row_slice(2, 1, &[0.3, 0.3]);
        let err = SparseGp::prior(vec![hyper(1.0, vec![1.0], 0.1)], z).unwrap_err();
        assert!(matches!(err, Error::DegeneratePseudoInputs(_)));
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::from_fn(25, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(25, 2, |i, o| (x[(i, 0)] + o as f64).sin() * x[(i, 1)].cos());
        let data = Dataset::new(x, y).unwrap();
        let z = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-2.0..2.0));
        let hypers = vec![hyper(0.8, vec![0.9, 1.3], 0.05), hyper(1.4, vec![0.6, 0.7], 0.2)];
        let g = elbo_with_gradient(&data, &z, &hypers).unwrap();
        let f = |hs: &[Hyperparameters<f64>], z: &DMatrix<f64>| collapsed_elbo(&data, z, hs).unwrap();
        assert!((g.value - f(&hypers, &z)).abs() < 1e-10);
        let eps = 1e-6;
        for o in 0..2 {
            let theta = hypers[o].to_log();
            for i in 0..theta.len() {
                let mut hp = hypers.clone();
                let mut hm = hypers.clone();
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += eps;
                tm[i] -= eps;
                hp[o] = Hyperparameters::from_log(&tp).unwrap();
                hm[o] = Hyperparameters::from_log(&tm).unwrap();
                let fd = (f(&hp, &z) - f(&hm, &z)) / (2.0 * eps);
                let an = g.hypers[o][i];
                assert!((an - fd).abs() <= 1e-5 * fd.abs().max(1e-2), "o={o} i={i}: {an} vs {fd}");
            }
        }
        for a in 0..5 {
            for j in 0..2 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[(a, j)] += eps;
                zm[(a, j)] -= eps;
                let fd = (f(&hypers, &zp) - f(&hypers, &zm)) / (2.0 * eps);
                let an = g.pseudo_inputs[(a, j)];
                assert!((an - fd).abs() <= 1e-5 * fd.abs().max(1e-2), "z[{a},{j}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn training_is_monotone_and_close_to_full_gp() {
        let data = sine_data(200, 12);
        let (gp, report) = train_sparse(&data, 10, None, &SparseTrainConfig::default()).unwrap();
        assert!(report.final_elbo >= report.initial_elbo);
        assert!(report.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
        assert_eq!(gp.num_pseudo(), 10);

        let init = [gp.hypers()[0].clone()];
        let full = crate::gp_full::fit_full(data.clone(), &init, &Default::default()).unwrap();
        let grid: Vec<f64> = (0..60).map(|i| -2.9 + i as f64 * 0.1).collect();
        let rmse = |pred: &dyn Fn(f64) -> f64| {
            (grid.iter().map(|&q| (pred(q) - q.sin()).powi(2)).sum::<f64>() / grid.len() as f64).sqrt()
        };
        let sparse_rmse = rmse(&|q| gp.predict(&[q]).unwrap().0[0]);
        let full_rmse = rmse(&|q| full.predict(&[q]).unwrap().0[0]);
        assert!(sparse_rmse <= 2.0 * full_rmse.max(1e-3), "{sparse_rmse} vs {full_rmse}");
    }

    #[test]
    fn frozen_training_at_data_keeps_exact_bound() {
        let data = sine_data(12, 4);
        let h = vec![hyper(0.9, vec![0.8], 0.05)];
        let cfg = SparseTrainConfig {
            optimize_hypers: false,
            ..Default::default()
        };
        let (_, report) = train_sparse_from(&data, data.inputs().clone(), h.clone(), &cfg).unwrap();
        let lml = log_marginal_likelihood(&data, &h).unwrap();
        let bias = 12.0 * JITTER * 0.9 / 0.05;
        assert!((report.final_elbo - lml).abs() < 1e-8 + bias);
    }

    #[test]
    fn pinned_kernel_parameters_do_not_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::<f64>::from_fn(80, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(80, 1, |i, _| (1.5 * x[(i, 0)]).sin() + 0.1 * x[(i, 1)]);
        let data = Dataset::new(x, y).unwrap();
        let z = kmeans_pseudo_inputs(data.inputs(), 6, 20, 1).unwrap();
        let h0 = vec![hyper(0.7, vec![2.0, 3.0], 0.1)];
        let cfg = SparseTrainConfig {
            max_steps: 150,
            fixed_length_scales: vec![1],
            fixed_signal_variance: true,
            ..Default::default()
        };
        let (gp, report) = train_sparse_from(&data, z.clone(), h0.clone(), &cfg).unwrap();
        let h = &gp.hypers()[0];
        assert!(report.final_elbo > report.initial_elbo);
        // held values only pass through exp(ln(.))
        assert!((h.kernel.signal_variance() - 0.7).abs() < 1e-14);
        assert!((h.kernel.length_scales()[1] - 3.0).abs() < 1e-14);
        assert!((h.kernel.length_scales()[0] - 2.0).abs() > 1e-3);
        assert!((h.noise.variance() - 0.1).abs() > 1e-3);

        let all = SparseTrainConfig {
            fixed_length_scales: vec![0, 1],
            optimize_pseudo_inputs: false,
            ..cfg.clone()
        };
        let (gp, _) = train_sparse_from(&data, z.clone(), h0.clone(), &all).unwrap();
        let k = &gp.hypers()[0].kernel;
        assert!((k.signal_variance() - 0.7).abs() < 1e-14);
        assert!((k.length_scales()[0] - 2.0).abs() < 1e-14 && (k.length_scales()[1] - 3.0).abs() < 1e-14);
        assert_eq!(gp.pseudo_inputs(), &z);

        let bad = SparseTrainConfig {
            fixed_length_scales: vec![2],
            ..Default::default()
        };
        assert!(matches!(train_sparse_from(&data, z, h0, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn kmeans_is_deterministic_and_distinct() {
        let data = sine_data(100, 6);
        let a = kmeans_pseudo_inputs(data.inputs(), 8, 20, 42).unwrap();
        let b = kmeans_pseudo_inputs(data.inputs(), 8, 20, 42).unwrap();
        assert_eq!(a, b);
        check_pseudo_inputs(&a).unwrap();
    }
}
