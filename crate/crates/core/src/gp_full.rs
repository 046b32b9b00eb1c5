//! Exact GP regression: posterior prediction and marginal-likelihood fitting.
//!
//! Each output column is an independent single-output GP that shares the
//! inputs and owns its hyperparameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{kernel_gradients, kernel_matrix_sym, kernel_vector, Hyperparameters};
use crate::linalg::Factor;
use crate::optim::{maximize, AscentConfig};
use crate::scalar::{lit, Real};

#[derive(Clone, Debug)]
pub struct FullGp<T: Real> {
    hypers: Vec<Hyperparameters<T>>,
    data: Dataset<T>,
    factors: Vec<Factor<T>>,
    alphas: Vec<DVector<T>>,
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub ascent: AscentConfig,
    /// Extra random starting points besides the supplied initialization.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            ascent: AscentConfig {
                max_steps: 200,
                ..AscentConfig::default()
            },
            restarts: 3,
            seed: 0,
        }
    }
}

fn check_hypers<T: Real>(data: &Dataset<T>, hypers: &[Hyperparameters<T>]) -> Result<()> {
    if hypers.len() != data.output_dim() {
        return Err(Error::Dimension(format!(
            "{} hyperparameter sets for {} outputs",
            hypers.len(),
            data.output_dim()
        )));
    }
    if hypers.iter().any(|h| h.kernel.input_dim() != data.input_dim()) {
        return Err(Error::Dimension("kernel dimension differs from data".into()));
    }
    Ok(())
}

/// Factor of `K_N + σ_ε² I` (plus jitter) for one output.
fn factor_output<T: Real>(inputs: &DMatrix<T>, hyper: &Hyperparameters<T>) -> Result<Factor<T>> {
    let mut k = kernel_matrix_sym(&hyper.kernel, inputs)?;
    for i in 0..k.nrows() {
        k[(i, i)] += hyper.noise.variance();
    }
    Factor::with_jitter(&k, hyper.kernel.signal_variance(), "K_N + noise")
}

fn lml_from_factor<T: Real>(factor: &Factor<T>, y: &DVector<T>) -> (T, DVector<T>) {
    let n = y.len();
    let alpha = factor.solve_vec(y);
    let half: T = lit(0.5);
    let value = -half * y.dot(&alpha)
        - half * factor.log_det()
        - half * lit::<T>(n as f64) * lit::<T>(2.0 * std::f64::consts::PI).ln();
    (value, alpha)
}

/// Log marginal likelihood and its gradient in log-parameter space
/// `[log σ_f², log ℓ_1..d, log σ_ε²]` for one output column.
pub fn lml_with_gradient<T: Real>(
    inputs: &DMatrix<T>,
    y: &DVector<T>,
    hyper: &Hyperparameters<T>,
) -> Result<(T, DVector<T>)> {
    let factor = factor_output(inputs, hyper)?;
    let (value, alpha) = lml_from_factor(&factor, y);
    let w = &alpha * alpha.transpose() - factor.inverse();
    let half: T = lit(0.5);
    let grads = kernel_gradients(&hyper.kernel, inputs)?;
    let d = hyper.kernel.input_dim();
    let mut g = DVector::zeros(d + 2);
    let sf = hyper.kernel.signal_variance();
    // C = K + (σ_ε² + jitter) I with jitter proportional to σ_f²
    let jitter_rel = factor.jitter / sf;
    g[0] = half * sf * (w.component_mul(&grads[0]).sum() + jitter_rel * w.trace());
    for j in 0..d {
        let l = hyper.kernel.length_scales()[j];
        g[j + 1] = half * l * w.component_mul(&grads[j + 1]).sum();
    }
    g[d + 1] = half * hyper.noise.variance() * w.trace();
    Ok((value, g))
}

/// `log P(Y) = Σ_o [-N/2 log 2π - ½ log|K_N + σ_ε²I| - ½ yᵀ(K_N + σ_ε²I)⁻¹ y]`
pub fn log_marginal_likelihood<T: Real>(data: &Dataset<T>, hypers: &[Hyperparameters<T>]) -> Result<T> {
    check_hypers(data, hypers)?;
    let mut total = T::zero();
    for (o, h) in hypers.iter().enumerate() {
        let f = factor_output(data.inputs(), h)?;
        total += lml_from_factor(&f, &data.output_column(o)).0;
    }
    Ok(total)
}

/// Sum over outputs of the log-space gradients, one vector per output.
pub fn log_marginal_likelihood_gradient<T: Real>(
    data: &Dataset<T>,
    hypers: &[Hyperparameters<T>],
) -> Result<Vec<DVector<T>>> {
    check_hypers(data, hypers)?;
    hypers
        .iter()
        .enumerate()
        .map(|(o, h)| lml_with_gradient(data.inputs(), &data.output_column(o), h).map(|r| r.1))
        .collect()
}

impl<T: Real> FullGp<T> {
    /// Conditions the GP on `data` with fixed hyperparameters.
    pub fn new(data: Dataset<T>, hypers: Vec<Hyperparameters<T>>) -> Result<Self> {
        check_hypers(&data, &hypers)?;
        if data.is_empty() {
            return Err(Error::InvalidParameter("full GP needs at least one sample".into()));
        }
        let mut factors = Vec::with_capacity(hypers.len());
        let mut alphas = Vec::with_capacity(hypers.len());
        for (o, h) in hypers.iter().enumerate() {
            let f = factor_output(data.inputs(), h)?;
            alphas.push(f.solve_vec(&data.output_column(o)));
            factors.push(f);
        }
        Ok(Self {
            hypers,
            data,
            factors,
            alphas,
        })
    }

    pub fn hypers(&self) -> &[Hyperparameters<T>] {
        &self.hypers
    }

    pub fn data(&self) -> &Dataset<T> {
        &self.data
    }

    /// Lower factor of `K_N + σ_ε²I` for output `o`.
    pub fn factor(&self, o: usize) -> &Factor<T> {
        &self.factors[o]
    }

    pub fn log_marginal_likelihood(&self) -> T {
        (0..self.hypers.len())
            .map(|o| {
                let y = self.data.output_column(o);
                let half: T = lit(0.5);
                -half * y.dot(&self.alphas[o])
                    - half * self.factors[o].log_det()
                    - half * lit::<T>(y.len() as f64) * lit::<T>(2.0 * std::f64::consts::PI).ln()
            })
            .fold(T::zero(), |a, b| a + b)
    }

    /// Posterior mean `K_*N (K_N + σ_ε²I)⁻¹ Y` and marginal variance
    /// `k_** - K_*N (K_N + σ_ε²I)⁻¹ K_N*` per output.
    pub fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        let p = self.hypers.len();
        let mut mean = DVector::zeros(p);
        let mut var = DVector::zeros(p);
        for (o, h) in self.hypers.iter().enumerate() {
            let ks = kernel_vector(&h.kernel, self.data.inputs(), x)?;
            mean[o] = ks.dot(&self.alphas[o]);
            let v = self.factors[o].solve_l_vec(&ks);
            var[o] = h.kernel.signal_variance() - v.norm_squared();
        }
        Ok((mean, var))
    }
}

/// Maximizes the log marginal likelihood per output dimension, starting from
/// `init` and `cfg.restarts` random perturbations of it; keeps the best.
pub fn fit_full<T: Real>(data: Dataset<T>, init: &[Hyperparameters<T>], cfg: &FitConfig) -> Result<FullGp<T>> {
    if data.len() < 2 {
        return Err(Error::InvalidParameter("fit_full needs at least two samples".into()));
    }
    let init: Vec<Hyperparameters<T>> = if init.len() == 1 && data.output_dim() > 1 {
        vec![init[0].clone(); data.output_dim()]
    } else {
        init.to_vec()
    };
    check_hypers(&data, &init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fitted = Vec::with_capacity(init.len());
    for (o, h0) in init.iter().enumerate() {
        let y = data.output_column(o);
        let base = DVector::from_vec(h0.to_log());
        let mut starts = vec![base.clone()];
        for _ in 0..cfg.restarts {
            starts.push(base.map(|v| v + lit::<T>(rng.random_range(-1.0..1.0))));
        }
        let mut best: Option<(T, DVector<T>)> = None;
        for start in starts {
            let objective = |theta: &DVector<T>| {
                let h = Hyperparameters::from_log(theta.as_slice())?;
                lml_with_gradient(data.inputs(), &y, &h)
            };
            let res = match maximize(start, &cfg.ascent, objective) {
                Ok(r) => r,
                // a random restart may land in a region where the factorization fails
                Err(_) => continue,
            };
            if best.as_ref().is_none_or(|(v, _)| res.value > *v) {
                best = Some((res.value, res.x));
            }
        }
        let (_, theta) = best.ok_or(Error::Singular {
            context: "fit_full",
            jitter: crate::linalg::MAX_JITTER,
        })?;
        fitted.push(Hyperparameters::from_log(theta.as_slice())?);
    }
    FullGp::new(data, fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelParams, NoiseParams};
    use crate::linalg::JITTER;
    use std::f64::consts::PI;

    fn hyper(sf: f64, ls: Vec<f64>, noise: f64) -> Hyperparameters<f64> {
        Hyperparameters::new(KernelParams::new(sf, ls).unwrap(), NoiseParams::new(noise).unwrap())
    }

    fn one_point(x: f64, y: f64) -> Dataset<f64> {
        Dataset::new(DMatrix::from_element(1, 1, x), DMatrix::from_element(1, 1, y)).unwrap()
    }

    #[test]
    fn scalar_likelihood_cases() {
        let h = [hyper(0.6, vec![1.0], 0.4)];
        let v0 = log_marginal_likelihood(&one_point(0.0, 0.0), &h).unwrap();
        assert!((v0 - (-0.5 * (2.0 * PI).ln())).abs() < 1e-7);
        assert!((v0 + 0.918939).abs() < 1e-6);
        let v1 = log_marginal_likelihood(&one_point(0.0, 1.0), &h).unwrap();
        assert!((v1 + 1.418939).abs() < 1e-6);
    }

    #[test]
    fn likelihood_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [4usize, 8] {
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let y = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
            let h = hyper(1.3, vec![0.6, 0.9], 0.05);
            let data = Dataset::new(x.clone(), y.clone()).unwrap();
            let got = log_marginal_likelihood(&data, std::slice::from_ref(&h)).unwrap();
            // explicit inverse and determinant
            let mut c = DMatrix::from_fn(n, n, |i, j| {
                let d0 = (x[(i, 0)] - x[(j, 0)]) / 0.6;
                let d1 = (x[(i, 1)] - x[(j, 1)]) / 0.9;
                1.3 * (-0.5 * (d0 * d0 + d1 * d1)).exp()
            });
            for i in 0..n {
                c[(i, i)] += 0.05 + JITTER * 1.3;
            }
            let inv = c.clone().try_inverse().unwrap();
            let yv = y.column(0).into_owned();
            let expected = -0.5 * (yv.transpose() * &inv * &yv)[(0, 0)]
                - 0.5 * c.determinant().ln()
                - 0.5 * n as f64 * (2.0 * PI).ln();
            assert!((got - expected).abs() < 1e-8, "n={n}: {got} vs {expected}");
        }
    }

    #[test]
    fn likelihood_drops_for_outsized_targets() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let h = [hyper(1.0, vec![1.0], 0.1)];
        let base = DMatrix::from_row_slice(3, 1, &[0.5, -0.2, 0.3]);
        let a = log_marginal_likelihood(&Dataset::new(x.clone(), base.clone()).unwrap(), &h).unwrap();
        let b = log_marginal_likelihood(&Dataset::new(x, base * 100.0).unwrap(), &h).unwrap();
        assert!(b < a);
    }

    #[test]
    fn closed_form_single_point_prediction() {
        let gp = FullGp::new(one_point(0.3, 2.0), vec![hyper(1.0, vec![1.0], 1.0)]).unwrap();
        let (m, v) = gp.predict(&[0.3]).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-7);
        assert!((v[0] - 0.5).abs() < 1e-7);

        let gp = FullGp::new(one_point(0.3, 2.0), vec![hyper(1.0, vec![1.0], 1e-12)]).unwrap();
        let (m, v) = gp.predict(&[0.3]).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-6);
        assert!(v[0].abs() < 1e-6);
    }

    #[test]
    fn far_points_revert_to_prior() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let y = DMatrix::from_row_slice(3, 1, &[1.0, -1.0, 2.0]);
        let gp = FullGp::new(Dataset::new(x, y).unwrap(), vec![hyper(1.7, vec![0.3], 0.01)]).unwrap();
        let (m, v) = gp.predict(&[100.0]).unwrap();
        assert!(m[0].abs() < 1e-12);
        assert!((v[0] - 1.7).abs() < 1e-12);
        assert!(gp.predict(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_targets_predict_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(10, 2, |_, _| rng.random_range(-1.0..1.0));
        let gp = FullGp::new(Dataset::new(x, DMatrix::zeros(10, 1)).unwrap(), vec![hyper(0.5, vec![0.3, 2.0], 0.1)])
            .unwrap();
        for _ in 0..10 {
            let q = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            assert_eq!(gp.predict(&q).unwrap().0[0], 0.0);
        }
    }

    #[test]
    fn interpolates_training_targets_when_noise_vanishes() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.7, 1.5, 2.2]);
        let y = DMatrix::from_row_slice(4, 1, &[0.3, -0.4, 0.9, 0.1]);
        let gp = FullGp::new(Dataset::new(x.clone(), y.clone()).unwrap(), vec![hyper(1.0, vec![0.5], 1e-10)]).unwrap();
        for i in 0..4 {
            let (m, v) = gp.predict(&[x[(i, 0)]]).unwrap();
            assert!((m[0] - y[(i, 0)]).abs() < 1e-4);
            assert!(v[0] >= -1e-8 && v[0] <= 1.0 + 1e-8);
        }
    }

    #[test]
    fn output_columns_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
        let hs = vec![
            hyper(1.0, vec![0.5, 0.5], 0.1),
            hyper(2.0, vec![0.9, 0.3], 0.01),
            hyper(0.4, vec![1.5, 1.0], 0.2),
        ];
        let gp = FullGp::new(Dataset::new(x.clone(), y.clone()).unwrap(), hs.clone()).unwrap();
        let perm = [2usize, 0, 1];
        let yp = DMatrix::from_fn(8, 3, |i, j| y[(i, perm[j])]);
        let hp: Vec<_> = perm.iter().map(|&j| hs[j].clone()).collect();
        let gpp = FullGp::new(Dataset::new(x, yp).unwrap(), hp).unwrap();
        let q = [0.2, -0.3];
        let (m, v) = gp.predict(&q).unwrap();
        let (mp, vp) = gpp.predict(&q).unwrap();
        for j in 0..3 {
            assert_eq!(mp[j], m[perm[j]]);
            assert_eq!(vp[j], v[perm[j]]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let h = hyper(0.8, vec![0.5, 1.2], 0.03);
        let (_, g) = lml_with_gradient(&x, &y, &h).unwrap();
        let theta = h.to_log();
        let eps = 1e-6;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += eps;
            tm[i] -= eps;
            let fp = lml_with_gradient(&x, &y, &Hyperparameters::from_log(&tp).unwrap()).unwrap().0;
            let fm = lml_with_gradient(&x, &y, &Hyperparameters::from_log(&tm).unwrap()).unwrap().0;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((g[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "param {i}: {} vs {fd}", g[i]);
        }
    }
}
