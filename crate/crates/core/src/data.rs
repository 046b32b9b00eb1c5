use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Training set: `N×d` inputs and `N×p` outputs, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Real> {
    inputs: DMatrix<T>,
    outputs: DMatrix<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(inputs: DMatrix<T>, outputs: DMatrix<T>) -> Result<Self> {
        if inputs.nrows() != outputs.nrows() {
            return Err(Error::Dimension(format!(
                "{} input rows but {} output rows",
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        if !outputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset outputs"));
        }
        Ok(Self { inputs, outputs })
    }

    /// Empty dataset with fixed input and output widths.
    pub fn empty(input_dim: usize, output_dim: usize) -> Self {
        Self {
            inputs: DMatrix::zeros(0, input_dim),
            outputs: DMatrix::zeros(0, output_dim),
        }
    }

    pub fn from_rows(rows: &[(Vec<T>, Vec<T>)]) -> Result<Self> {
        let (d, p) = match rows.first() {
            Some((x, y)) => (x.len(), y.len()),
            None => return Err(Error::Dimension("no rows".into())),
        };
        if rows.iter().any(|(x, y)| x.len() != d || y.len() != p) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let inputs = DMatrix::from_fn(rows.len(), d, |i, j| rows[i].0[j]);
        let outputs = DMatrix::from_fn(rows.len(), p, |i, j| rows[i].1[j]);
        Self::new(inputs, outputs)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<T> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<T> {
        &self.outputs
    }

    pub fn input_row(&self, i: usize) -> Vec<T> {
        self.inputs.row(i).iter().copied().collect()
    }

    pub fn output_row(&self, i: usize) -> Vec<T> {
        self.outputs.row(i).iter().copied().collect()
    }

    /// Appends one sample.
    pub fn push(&mut self, input: &[T], output: &[T]) -> Result<()> {
        if input.len() != self.input_dim() || output.len() != self.output_dim() {
            return Err(Error::Dimension("sample width does not match dataset".into()));
        }
        if !input.iter().chain(output).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sample"));
        }
        let n = self.len();
        let inputs = std::mem::replace(&mut self.inputs, DMatrix::zeros(0, 0));
        self.inputs = inputs.insert_row(n, T::zero());
        let outputs = std::mem::replace(&mut self.outputs, DMatrix::zeros(0, 0));
        self.outputs = outputs.insert_row(n, T::zero());
        for (j, v) in input.iter().enumerate() {
            self.inputs[(n, j)] = *v;
        }
        for (j, v) in output.iter().enumerate() {
            self.outputs[(n, j)] = *v;
        }
        Ok(())
    }

    /// Rows `self ++ other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.input_dim() != other.input_dim() || self.output_dim() != other.output_dim() {
            return Err(Error::Dimension("cannot concatenate datasets of different widths".into()));
        }
        let n = self.len();
        let m = other.len();
        let inputs = DMatrix::from_fn(n + m, self.input_dim(), |i, j| {
            if i < n {
                self.inputs[(i, j)]
            } else {
                other.inputs[(i - n, j)]
            }
        });
        let outputs = DMatrix::from_fn(n + m, self.output_dim(), |i, j| {
            if i < n {
                self.outputs[(i, j)]
            } else {
                other.outputs[(i - n, j)]
            }
        });
        Ok(Self { inputs, outputs })
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(rows),
            outputs: self.outputs.select_rows(rows),
        }
    }

    /// The last `count` rows (all rows if fewer).
    pub fn tail(&self, count: usize) -> Self {
        let start = self.len().saturating_sub(count);
        let rows: Vec<usize> = (start..self.len()).collect();
        self.select(&rows)
    }

    /// `count` rows picked at evenly spaced positions, keeping order.
    pub fn subsample_uniform(&self, count: usize) -> Self {
        let n = self.len();
        if count >= n {
            return self.clone();
        }
        let rows: Vec<usize> = (0..count).map(|i| i * n / count).collect();
        self.select(&rows)
    }

    /// Column `o` of the outputs.
    pub fn output_column(&self, o: usize) -> nalgebra::DVector<T> {
        self.outputs.column(o).into_owned()
    }
}
