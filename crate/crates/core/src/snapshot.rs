//! Versioned JSON records for sparse and dual GPs.
//!
//! Values are stored as `f64` whatever the model scalar; for `f64` models a
//! save/load round trip is bit-exact.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_dual::DualGp;
use crate::gp_online::RecursiveState;
use crate::gp_sparse::{SparseGp, VariationalPosterior};
use crate::kernels::{Hyperparameters, KernelParams, NoiseParams};
use crate::scalar::{lit, to_f64, Real};

pub const SPARSE_FORMAT: &str = "dgp-sparse-gp";
pub const DUAL_FORMAT: &str = "dgp-dual-gp";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
    /// `m_u`, length M.
    pub mean: Vec<f64>,
    /// Rows of the factor `C` with `S_u = C Cᵀ`, M×M.
    pub cov_factor: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseGpRecord {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub num_pseudo: usize,
    /// Rows of Z, M×d.
    pub pseudo_inputs: Vec<Vec<f64>>,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualGpRecord {
    pub format: String,
    pub version: u32,
    pub lambda: f64,
    pub step: u64,
    pub long: SparseGpRecord,
    /// Short-term GP with its current posterior.
    pub short: SparseGpRecord,
}

fn rows<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| to_f64(*v)).collect()).collect()
}

fn from_rows<T: Real>(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<T>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Snapshot(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| lit(rows[i][j])))
}

impl SparseGpRecord {
    pub fn from_model<T: Real>(gp: &SparseGp<T>) -> Self {
        Self::with_posterior(gp, gp.posterior())
    }

    fn with_posterior<T: Real>(gp: &SparseGp<T>, q: &VariationalPosterior<T>) -> Self {
        let outputs = gp
            .hypers()
            .iter()
            .enumerate()
            .map(|(o, h)| OutputRecord {
                signal_variance: to_f64(h.kernel.signal_variance()),
                length_scales: h.kernel.length_scales().iter().map(|v| to_f64(*v)).collect(),
                noise_variance: to_f64(h.noise.variance()),
                mean: q.means.column(o).iter().map(|v| to_f64(*v)).collect(),
                cov_factor: rows(&q.cov_factors[o]),
            })
            .collect();
        Self {
            format: SPARSE_FORMAT.into(),
            version: VERSION,
            input_dim: gp.input_dim(),
            output_dim: gp.output_dim(),
            num_pseudo: gp.num_pseudo(),
            pseudo_inputs: rows(gp.pseudo_inputs()),
            outputs,
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<SparseGp<T>> {
        if self.format != SPARSE_FORMAT {
            return Err(Error::Snapshot(format!("unexpected format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {}", self.version)));
        }
        let (m, d, p) = (self.num_pseudo, self.input_dim, self.output_dim);
        if self.outputs.len() != p {
            return Err(Error::Snapshot(format!("expected {p} output records")));
        }
        let z = from_rows(&self.pseudo_inputs, m, d, "pseudo_inputs")?;
        let mut hypers = Vec::with_capacity(p);
        let mut means = DMatrix::zeros(m, p);
        let mut factors = Vec::with_capacity(p);
        for (o, rec) in self.outputs.iter().enumerate() {
            if rec.length_scales.len() != d || rec.mean.len() != m {
                return Err(Error::Snapshot(format!("output {o} has inconsistent sizes")));
            }
            let kernel = KernelParams::new(lit(rec.signal_variance), rec.length_scales.iter().map(|v| lit(*v)).collect())?;
            hypers.push(Hyperparameters::new(kernel, NoiseParams::new(lit(rec.noise_variance))?));
            for (i, v) in rec.mean.iter().enumerate() {
                means[(i, o)] = lit(*v);
            }
            factors.push(from_rows(&rec.cov_factor, m, m, "cov_factor")?);
        }
        SparseGp::from_parts(
            hypers,
            z,
            VariationalPosterior {
                means,
                cov_factors: factors,
            },
        )
    }
}

impl DualGpRecord {
    pub fn from_model<T: Real>(dual: &DualGp<T>) -> Self {
        Self {
            format: DUAL_FORMAT.into(),
            version: VERSION,
            lambda: to_f64(dual.lambda()),
            step: dual.state().step(),
            long: SparseGpRecord::from_model(dual.long()),
            short: SparseGpRecord::with_posterior(dual.short(), dual.state().posterior()),
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<DualGp<T>> {
        if self.format != DUAL_FORMAT {
            return Err(Error::Snapshot(format!("unexpected format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {}", self.version)));
        }
        let long = self.long.to_model::<T>()?;
        let short_now = self.short.to_model::<T>()?;
        let short = SparseGp::prior(short_now.hypers().to_vec(), short_now.pseudo_inputs().clone())?;
        let state = RecursiveState::new(short_now.posterior().clone(), lit(self.lambda))?.with_step(self.step);
        DualGp::from_components(long, short, state)
    }
}

fn to_json<S: Serialize>(rec: &S) -> Result<String> {
    serde_json::to_string_pretty(rec).map_err(|e| Error::Snapshot(e.to_string()))
}

fn parse<S: for<'de> Deserialize<'de>>(text: &str) -> Result<S> {
    serde_json::from_str(text).map_err(|e| Error::Snapshot(e.to_string()))
}

pub fn sparse_to_json<T: Real>(gp: &SparseGp<T>) -> Result<String> {
    to_json(&SparseGpRecord::from_model(gp))
}

pub fn sparse_from_json<T: Real>(text: &str) -> Result<SparseGp<T>> {
    parse::<SparseGpRecord>(text)?.to_model()
}

pub fn dual_to_json<T: Real>(dual: &DualGp<T>) -> Result<String> {
    to_json(&DualGpRecord::from_model(dual))
}

pub fn dual_from_json<T: Real>(text: &str) -> Result<DualGp<T>> {
    parse::<DualGpRecord>(text)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> SparseGp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let h = (0..2)
            .map(|o| {
                Hyperparameters::new(
                    KernelParams::new(0.7 + o as f64 / 3.0, vec![0.3, 1.0 / 7.0, 2.2]).unwrap(),
                    NoiseParams::new(0.01 * std::f64::consts::PI).unwrap(),
                )
            })
            .collect();
        let gp = SparseGp::prior(h, z).unwrap();
        let mut q = gp.posterior().clone();
        q.means = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        gp.with_posterior(q).unwrap()
    }

    #[test]
    fn sparse_round_trip_is_exact() {
        let gp = model();
        let back: SparseGp<f64> = sparse_from_json(&sparse_to_json(&gp).unwrap()).unwrap();
        assert_eq!(back.posterior(), gp.posterior());
        assert_eq!(back.pseudo_inputs(), gp.pseudo_inputs());
        assert_eq!(back.hypers(), gp.hypers());
        assert_eq!(back.predict(&[0.1, 0.2, 0.3]).unwrap(), gp.predict(&[0.1, 0.2, 0.3]).unwrap());
    }

    #[test]
    fn dual_round_trip_keeps_state() {
        let mut dual = DualGp::from_long(model(), 0.97).unwrap();
        dual.online_update(&[0.0, 0.1, 0.2], &[1.0, -1.0]).unwrap();
        let text = dual_to_json(&dual).unwrap();
        let back: DualGp<f64> = dual_from_json(&text).unwrap();
        assert_eq!(back.state(), dual.state());
        assert_eq!(back.lambda(), 0.97);
        assert_eq!(back.state().step(), 1);
        assert_eq!(back.predict(&[0.3, 0.0, -0.2]).unwrap(), dual.predict(&[0.3, 0.0, -0.2]).unwrap());
        assert_eq!(sparse_to_json(back.long()).unwrap(), sparse_to_json(dual.long()).unwrap());
    }

    #[test]
    fn rejects_wrong_version_and_shapes() {
        let mut rec = SparseGpRecord::from_model(&model());
        rec.version = 99;
        assert!(matches!(rec.to_model::<f64>(), Err(Error::Snapshot(_))));
        let mut rec = SparseGpRecord::from_model(&model());
        rec.outputs[1].mean.pop();
        assert!(rec.to_model::<f64>().is_err());
        assert!(sparse_from_json::<f64>("{not json").is_err());
    }

    #[test]
    fn loads_into_single_precision() {
        let text = sparse_to_json(&model()).unwrap();
        let gp: SparseGp<f32> = sparse_from_json(&text).unwrap();
        let (m, v) = gp.predict(&[0.1, 0.2, 0.3]).unwrap();
        let (m64, v64) = model().predict(&[0.1, 0.2, 0.3]).unwrap();
        assert!((m[0] as f64 - m64[0]).abs() < 1e-3);
        assert!((v[1] as f64 - v64[1]).abs() < 1e-3);
    }
}
