//! Dense linear-algebra helpers: jittered Cholesky and triangular solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

/// Relative jitter added to kernel diagonals before every factorization.
pub const JITTER: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

/// Lower Cholesky factor of `matrix + jitter * I`.
#[derive(Clone, Debug)]
pub struct Factor<T: Real> {
    pub l: DMatrix<T>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: T,
}

impl<T: Real> Factor<T> {
    /// Factorizes `matrix + JITTER * scale * I`, multiplying the jitter by ten on
    /// failure up to `MAX_JITTER * scale`.
    pub fn with_jitter(matrix: &DMatrix<T>, scale: T, context: &'static str) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Dimension(format!(
                "{context}: {}x{} is not square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let ten: T = lit(10.0);
        let max = lit::<T>(MAX_JITTER) * scale * lit(1.000_001);
        let mut jitter = lit::<T>(JITTER) * scale;
        loop {
            if let Some(f) = Self::exact_with(matrix, jitter) {
                return Ok(f);
            }
            jitter *= ten;
            if jitter > max {
                return Err(Error::Singular {
                    context,
                    jitter: to_f64(jitter / ten),
                });
            }
        }
    }

    /// Factorizes `matrix + jitter * I` without escalation.
    pub fn exact_with(matrix: &DMatrix<T>, jitter: T) -> Option<Self> {
        let mut m = matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        let chol = m.cholesky()?;
        let l = chol.unpack();
        if l.iter().all(|v| v.is_finite()) {
            Some(Self { l, jitter })
        } else {
            None
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `L⁻¹ b`
    pub fn solve_l(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_l_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `L⁻ᵀ b`
    pub fn solve_lt(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.l
            .tr_solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_lt_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.l
            .tr_solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `(L Lᵀ)⁻¹ b`
    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.solve_lt(&self.solve_l(b))
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.solve_lt_vec(&self.solve_l_vec(b))
    }

    pub fn inverse(&self) -> DMatrix<T> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    pub fn log_det(&self) -> T {
        let two: T = lit(2.0);
        self.l.diagonal().iter().fold(T::zero(), |acc, d| acc + two * d.ln())
    }

    /// The factorized matrix, jitter included.
    pub fn reconstruct(&self) -> DMatrix<T> {
        &self.l * self.l.transpose()
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    let sym = (m + m.transpose()) * lit::<T>(0.5);
    sym.symmetric_eigen().eigenvalues.min()
}

/// Symmetrizes in place.
pub fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let half: T = lit(0.5);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn all_finite<T: Real>(values: impl IntoIterator<Item = T>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}
