//! Squared-exponential kernel with per-dimension (ARD) length scales.
//!
//! `k(x, x') = σ_f² exp(-½ Σ_j (x_j - x'_j)² / ℓ_j²)`

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    signal_variance: T,
    length_scales: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams<T> {
    noise_variance: T,
}

/// Kernel and noise hyperparameters of one output dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters<T> {
    pub kernel: KernelParams<T>,
    pub noise: NoiseParams<T>,
}

fn positive<T: Real>(v: T, what: &str) -> Result<()> {
    if v.is_finite() && v > T::zero() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be positive and finite")))
    }
}

impl<T: Real> KernelParams<T> {
    pub fn new(signal_variance: T, length_scales: Vec<T>) -> Result<Self> {
        positive(signal_variance, "signal variance")?;
        if length_scales.is_empty() {
            return Err(Error::InvalidParameter("kernel needs at least one length scale".into()));
        }
        for &l in &length_scales {
            positive(l, "length scale")?;
        }
        Ok(Self {
            signal_variance,
            length_scales,
        })
    }

    pub fn isotropic(signal_variance: T, length_scale: T, dim: usize) -> Result<Self> {
        Self::new(signal_variance, vec![length_scale; dim])
    }

    pub fn signal_variance(&self) -> T {
        self.signal_variance
    }

    pub fn length_scales(&self) -> &[T] {
        &self.length_scales
    }

    pub fn input_dim(&self) -> usize {
        self.length_scales.len()
    }

    /// Same length scales, different signal variance.
    pub fn with_signal_variance(&self, signal_variance: T) -> Result<Self> {
        Self::new(signal_variance, self.length_scales.clone())
    }

    /// `½ (x - x')ᵀ Λ⁻² (x - x')`
    #[inline]
    pub(crate) fn half_sq_dist(&self, x: impl Iterator<Item = T>, x2: impl Iterator<Item = T>) -> T {
        let mut acc = T::zero();
        for ((a, b), l) in x.zip(x2).zip(&self.length_scales) {
            let r = (a - b) / *l;
            acc += r * r;
        }
        acc * lit(0.5)
    }

    #[inline]
    pub(crate) fn eval_iter(&self, x: impl Iterator<Item = T>, x2: impl Iterator<Item = T>) -> T {
        self.signal_variance * (-self.half_sq_dist(x, x2)).exp()
    }

    /// Kernel value between two input vectors.
    pub fn eval(&self, x: &[T], x2: &[T]) -> Result<T> {
        let d = self.input_dim();
        if x.len() != d || x2.len() != d {
            return Err(Error::Dimension(format!(
                "kernel expects dimension {d}, got {} and {}",
                x.len(),
                x2.len()
            )));
        }
        Ok(self.eval_iter(x.iter().copied(), x2.iter().copied()))
    }

    /// `[log σ_f², log ℓ_1, …, log ℓ_d]`
    pub fn to_log(&self) -> Vec<T> {
        std::iter::once(self.signal_variance.ln())
            .chain(self.length_scales.iter().map(|l| l.ln()))
            .collect()
    }

    pub fn from_log(log: &[T]) -> Result<Self> {
        if log.len() < 2 {
            return Err(Error::Dimension("log kernel parameters need at least 2 entries".into()));
        }
        Self::new(log[0].exp(), log[1..].iter().map(|v| v.exp()).collect())
    }
}

impl<T: Real> NoiseParams<T> {
    pub fn new(noise_variance: T) -> Result<Self> {
        positive(noise_variance, "noise variance")?;
        Ok(Self { noise_variance })
    }

    pub fn variance(&self) -> T {
        self.noise_variance
    }
}

impl<T: Real> Hyperparameters<T> {
    pub fn new(kernel: KernelParams<T>, noise: NoiseParams<T>) -> Self {
        Self { kernel, noise }
    }

    /// Number of log-space parameters: signal variance, `d` length scales, noise.
    pub fn num_log_params(&self) -> usize {
        self.kernel.input_dim() + 2
    }

    /// `[log σ_f², log ℓ_1, …, log ℓ_d, log σ_ε²]`
    pub fn to_log(&self) -> Vec<T> {
        let mut v = self.kernel.to_log();
        v.push(self.noise.noise_variance.ln());
        v
    }

    pub fn from_log(log: &[T]) -> Result<Self> {
        let (noise, kernel) = log
            .split_last()
            .ok_or_else(|| Error::Dimension("empty hyperparameter vector".into()))?;
        Ok(Self {
            kernel: KernelParams::from_log(kernel)?,
            noise: NoiseParams::new(noise.exp())?,
        })
    }

    /// Data-driven starting point for one output column: signal variance from the
    /// output variance, length scales from the input spreads, noise at 1% of signal.
    pub fn from_data(inputs: &DMatrix<T>, output: impl Iterator<Item = T>) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::InvalidParameter("cannot initialise from empty data".into()));
        }
        let nf: T = lit(n as f64);
        let ys: Vec<T> = output.collect();
        let mean = ys.iter().fold(T::zero(), |a, b| a + *b) / nf;
        let var = ys.iter().fold(T::zero(), |a, y| a + (*y - mean) * (*y - mean)) / nf;
        let signal = var.max(lit(1e-4));
        let mut ls = Vec::with_capacity(inputs.ncols());
        for col in inputs.column_iter() {
            let m = col.iter().fold(T::zero(), |a, b| a + *b) / nf;
            let v = col.iter().fold(T::zero(), |a, x| a + (*x - m) * (*x - m)) / nf;
            ls.push(v.sqrt().max(lit(1e-2)));
        }
        Ok(Self {
            kernel: KernelParams::new(signal, ls)?,
            noise: NoiseParams::new(signal * lit(0.01))?,
        })
    }
}

fn check_dims<T: Real>(params: &KernelParams<T>, x: &DMatrix<T>, x2: &DMatrix<T>) -> Result<()> {
    let d = params.input_dim();
    if x.ncols() != d || x2.ncols() != d {
        return Err(Error::Dimension(format!(
            "kernel expects {d} input columns, got {} and {}",
            x.ncols(),
            x2.ncols()
        )));
    }
    Ok(())
}

/// Cross-covariance `[K]_ij = k(x_i, x2_j)` between the rows of two input matrices.
pub fn kernel_matrix<T: Real>(
    params: &KernelParams<T>,
    x: &DMatrix<T>,
    x2: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    check_dims(params, x, x2)?;
    Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
        params.eval_iter(x.row(i).iter().copied(), x2.row(j).iter().copied())
    }))
}

/// `K(X, X)`, filled from the upper triangle so the result is exactly symmetric.
pub fn kernel_matrix_sym<T: Real>(params: &KernelParams<T>, x: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_dims(params, x, x)?;
    let n = x.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in (i + 1)..n {
            let v = params.eval_iter(x.row(i).iter().copied(), x.row(j).iter().copied());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Cross-covariance between every row of `x` and a single point.
pub fn kernel_vector<T: Real>(
    params: &KernelParams<T>,
    x: &DMatrix<T>,
    point: &[T],
) -> Result<nalgebra::DVector<T>> {
    if x.ncols() != params.input_dim() || point.len() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "kernel expects dimension {}, got {} and {}",
            params.input_dim(),
            x.ncols(),
            point.len()
        )));
    }
    Ok(nalgebra::DVector::from_fn(x.nrows(), |i, _| {
        params.eval_iter(x.row(i).iter().copied(), point.iter().copied())
    }))
}

/// Derivatives of `K(X, X)` with respect to `[σ_f², ℓ_1, …, ℓ_d]`, one `n×n`
/// matrix per parameter.
pub fn kernel_gradients<T: Real>(params: &KernelParams<T>, x: &DMatrix<T>) -> Result<Vec<DMatrix<T>>> {
    let k = kernel_matrix_sym(params, x)?;
    let n = x.nrows();
    let mut grads = Vec::with_capacity(params.input_dim() + 1);
    grads.push(&k / params.signal_variance);
    for (j, &l) in params.length_scales.iter().enumerate() {
        let l3 = l * l * l;
        grads.push(DMatrix::from_fn(n, n, |a, b| {
            let diff = x[(a, j)] - x[(b, j)];
            k[(a, b)] * diff * diff / l3
        }));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_distance_returns_signal_variance() {
        let p = KernelParams::isotropic(1.0, 1.0, 2).unwrap();
        assert_eq!(p.eval(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        let p = KernelParams::new(2.5, vec![0.3, 7.0]).unwrap();
        assert_eq!(p.eval(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 2.5);
    }

    #[test]
    fn unit_exponent_gives_inverse_e() {
        let p = KernelParams::isotropic(1.0, 1.0, 2).unwrap();
        // |x - x2|² = 2
        let v = p.eval(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_parameters_and_dimensions() {
        assert!(KernelParams::new(0.0, vec![1.0]).is_err());
        assert!(KernelParams::new(1.0, vec![1.0, -1.0]).is_err());
        assert!(KernelParams::<f64>::new(1.0, vec![]).is_err());
        assert!(NoiseParams::new(-1e-3).is_err());
        let p = KernelParams::isotropic(1.0, 1.0, 2).unwrap();
        assert!(matches!(p.eval(&[0.0], &[0.0, 1.0]), Err(Error::Dimension(_))));
        let x = DMatrix::zeros(2, 3);
        assert!(kernel_matrix(&p, &x, &x).is_err());
    }

    #[test]
    fn single_point_and_duplicated_rows() {
        let p = KernelParams::new(1.7, vec![0.5, 2.0]).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[0.1, 0.2]);
        let k = kernel_matrix(&p, &x, &x).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert_eq!(k[(0, 0)], 1.7);

        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.1, 0.2, -1.0, 3.0]);
        let k = kernel_matrix_sym(&p, &x).unwrap();
        assert_eq!(k.row(0), k.row(1));
        assert!(k.clone().rank(1e-12) < 3);
    }

    #[test]
    fn random_matrix_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = KernelParams::new(1.3, vec![0.7, 1.1]).unwrap();
        let x = random_inputs(&mut rng, 5, 2);
        let k = kernel_matrix(&p, &x, &x).unwrap();
        assert!(min_eigenvalue(&k) >= -1e-10);
    }

    #[test]
    fn gradient_wrt_signal_variance_is_k_over_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = KernelParams::new(2.0, vec![0.7, 1.1]).unwrap();
        let x = random_inputs(&mut rng, 4, 2);
        let g = kernel_gradients(&p, &x).unwrap();
        let k = kernel_matrix_sym(&p, &x).unwrap();
        assert!((&g[0] - k / 2.0).abs().max() < 1e-15);
    }

    #[test]
    fn single_point_length_scale_gradient_vanishes() {
        let p = KernelParams::new(2.0, vec![0.7, 1.1]).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[0.4, -0.2]);
        let g = kernel_gradients(&p, &x).unwrap();
        assert_eq!(g[1][(0, 0)], 0.0);
        assert_eq!(g[2][(0, 0)], 0.0);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_inputs(&mut rng, 3, 2);
        let p = KernelParams::new(1.4, vec![0.8, 1.3]).unwrap();
        let grads = kernel_gradients(&p, &x).unwrap();
        let h = 1e-5;
        let mut nat = vec![p.signal_variance()];
        nat.extend_from_slice(p.length_scales());
        for (idx, g) in grads.iter().enumerate() {
            let mut plus = nat.clone();
            let mut minus = nat.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let kp = kernel_matrix(&KernelParams::new(plus[0], plus[1..].to_vec()).unwrap(), &x, &x).unwrap();
            let km = kernel_matrix(&KernelParams::new(minus[0], minus[1..].to_vec()).unwrap(), &x, &x).unwrap();
            let fd = (kp - km) / (2.0 * h);
            assert!((g - &fd).abs().max() < 1e-6, "param {idx}");
        }
    }

    #[test]
    fn log_roundtrip() {
        let h = Hyperparameters::<f64>::new(
            KernelParams::new(0.3, vec![1.5, 0.2]).unwrap(),
            NoiseParams::new(1e-3).unwrap(),
        );
        let back = Hyperparameters::from_log(&h.to_log()).unwrap();
        assert!((back.kernel.signal_variance() - 0.3).abs() < 1e-14);
        assert!((back.noise.variance() - 1e-3).abs() < 1e-17);
        assert_eq!(h.num_log_params(), 4);
    }

    proptest! {
        #[test]
        fn symmetric_psd_and_scaling(seed in 0u64..1000, n in 1usize..50, sf in 0.1f64..5.0, l in 0.2f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_inputs(&mut rng, n, 3);
            let p = KernelParams::new(sf, vec![l, 1.5 * l, 0.5 * l]).unwrap();
            let k = kernel_matrix(&p, &x, &x).unwrap();
            prop_assert_eq!(&k, &k.transpose());
            let shifted = &k + DMatrix::identity(n, n) * 1e-10;
            prop_assert!(min_eigenvalue(&shifted) >= 0.0);

            let p2 = KernelParams::new(2.0 * sf, p.length_scales().to_vec()).unwrap();
            for i in 0..n.min(5) {
                let a: Vec<f64> = x.row(i).iter().copied().collect();
                let b: Vec<f64> = x.row(n - 1 - i).iter().copied().collect();
                let v = p.eval(&a, &b).unwrap();
                prop_assert_eq!(p2.eval(&a, &b).unwrap(), 2.0 * v);
                prop_assert!(v >= 0.0 && v <= sf);
                prop_assert_eq!(v, p.eval(&b, &a).unwrap());
            }
        }
    }
}
