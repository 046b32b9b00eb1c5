//! Recursive (RLS-style) update of a sparse GP's `q(u)` with exponential
//! forgetting, in square-root form.
//!
//! Per output, with `Φ` the basis row at `x_k`, `S = C Cᵀ` and `v = Cᵀ Φᵀ`:
//!
//! ```text
//! r   = y - Φ m
//! G_S = λ σ² + vᵀv
//! m'  = m + C v r / G_S
//! S'  = (S - S Φᵀ Φ S / G_S) / λ
//! ```
//!
//! The reported gain `G = G_S / σ² = λ + Φ S Φᵀ / σ²` is the noise-normalised
//! innovation variance. With `λ = 1` streaming a dataset from the prior
//! `(0, K_M)` reproduces the batch optimum exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp_sparse::{SparseGp, VariationalPosterior};
use crate::scalar::{lit, Real};

/// Smallest admissible normalised gain `G`.
pub const MIN_GAIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RecursiveState<T: Real> {
    posterior: VariationalPosterior<T>,
    lambda: T,
    step: u64,
}

/// Per-step quantities of one update.
#[derive(Clone, Debug)]
pub struct UpdateInfo<T: Real> {
    pub residual: DVector<T>,
    pub gain: DVector<T>,
}

impl<T: Real> RecursiveState<T> {
    pub fn new(posterior: VariationalPosterior<T>, lambda: T) -> Result<Self> {
        if !(lambda > T::zero() && lambda <= T::one()) {
            return Err(Error::InvalidParameter(format!(
                "forgetting factor must lie in (0, 1], got {lambda}"
            )));
        }
        Ok(Self {
            posterior,
            lambda,
            step: 0,
        })
    }

    /// Starts from the prior `(0, K_M)` of `gp`.
    pub fn from_prior(gp: &SparseGp<T>, lambda: T) -> Result<Self> {
        Self::new(gp.prior_posterior(), lambda)
    }

    pub fn posterior(&self) -> &VariationalPosterior<T> {
        &self.posterior
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    /// Applies one update in place. The state is left untouched on error.
    pub fn update(&mut self, gp: &SparseGp<T>, x: &[T], y: &[T]) -> Result<UpdateInfo<T>> {
        let p = gp.output_dim();
        if y.len() != p {
            return Err(Error::Dimension(format!("expected {p} targets, got {}", y.len())));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("recursive update target"));
        }
        if self.posterior.num_pseudo() != gp.num_pseudo() || self.posterior.output_dim() != p {
            return Err(Error::Dimension("state does not match the sparse GP".into()));
        }
        let lambda = self.lambda;
        let inv_sqrt_lambda = T::one() / lambda.sqrt();
        let mut means = self.posterior.means.clone();
        let mut factors = Vec::with_capacity(p);
        let mut residual = DVector::zeros(p);
        let mut gain = DVector::zeros(p);
        for o in 0..p {
            let phi = gp.basis_row(x, o)?;
            let c = &self.posterior.cov_factors[o];
            let noise = gp.hypers()[o].noise.variance();
            let v = c.tr_mul(&phi);
            let s = v.norm_squared();
            let g_s = lambda * noise + s;
            let g = g_s / noise;
            if !(g >= lit(MIN_GAIN)) {
                return Err(Error::Conditioning(crate::scalar::to_f64(g)));
            }
            let r = y[o] - phi.dot(&means.column(o));
            let cv = c * &v;
            if r != T::zero() {
                let step = &cv * (r / g_s);
                let mut col = means.column_mut(o);
                col += step;
            }
            let new_c: DMatrix<T> = if s > T::zero() {
                let beta = (T::one() - (lambda * noise / g_s).sqrt()) / s;
                (c - &cv * v.transpose() * beta) * inv_sqrt_lambda
            } else {
                c * inv_sqrt_lambda
            };
            residual[o] = r;
            gain[o] = g;
            factors.push(new_c);
        }
        if !means.iter().all(|v| v.is_finite()) || !factors.iter().all(|c| c.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("recursive update result"));
        }
        self.posterior = VariationalPosterior {
            means,
            cov_factors: factors,
        };
        self.step += 1;
        Ok(UpdateInfo { residual, gain })
    }
}

/// Functional form of [`RecursiveState::update`].
pub fn recursive_update<T: Real>(
    state: &RecursiveState<T>,
    gp: &SparseGp<T>,
    x: &[T],
    y: &[T],
) -> Result<RecursiveState<T>> {
    let mut next = state.clone();
    next.update(gp, x, y)?;
    Ok(next)
}

/// A sparse GP whose `q(u)` is adapted online.
#[derive(Clone, Debug)]
pub struct OnlineSparseGp<T: Real> {
    model: SparseGp<T>,
    state: RecursiveState<T>,
}

impl<T: Real> OnlineSparseGp<T> {
    /// Continues from the model's current posterior.
    pub fn new(model: SparseGp<T>, lambda: T) -> Result<Self> {
        let state = RecursiveState::new(model.posterior().clone(), lambda)?;
        Ok(Self { model, state })
    }

    pub fn from_state(model: SparseGp<T>, state: RecursiveState<T>) -> Result<Self> {
        if state.posterior().num_pseudo() != model.num_pseudo() || state.posterior().output_dim() != model.output_dim() {
            return Err(Error::Dimension("state does not match the sparse GP".into()));
        }
        Ok(Self { model, state })
    }

    pub fn model(&self) -> &SparseGp<T> {
        &self.model
    }

    pub fn state(&self) -> &RecursiveState<T> {
        &self.state
    }

    pub fn update(&mut self, x: &[T], y: &[T]) -> Result<UpdateInfo<T>> {
        self.state.update(&self.model, x, y)
    }

    pub fn predict(&self, x: &[T]) -> Result<(DVector<T>, DVector<T>)> {
        self.model.predict_with(self.state.posterior(), x)
    }

    /// Fitted model carrying the current posterior.
    pub fn snapshot(&self) -> Result<SparseGp<T>> {
        self.model.with_posterior(self.state.posterior().clone())
    }
}
