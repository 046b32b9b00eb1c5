//! Dual Gaussian process regression and GP-based model predictive control for
//! quadcopter trajectory tracking.
//!
//! The numerical code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the common instantiations.

pub mod data;
pub mod error;
pub mod gp_dual;
pub mod gp_full;
pub mod gp_online;
pub mod gp_sparse;
pub mod kernels;
pub mod linalg;
pub mod mpc;
pub mod optim;
pub mod quad;
pub mod scalar;
pub mod snapshot;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Dataset64 = data::Dataset<f64>;
pub type Hyperparameters64 = kernels::Hyperparameters<f64>;
pub type FullGp64 = gp_full::FullGp<f64>;
pub type SparseGp64 = gp_sparse::SparseGp<f64>;
pub type OnlineSparseGp64 = gp_online::OnlineSparseGp<f64>;
pub type DualGp64 = gp_dual::DualGp<f64>;
pub type MpcConfig64 = mpc::MpcConfig<f64>;
pub type LinearModel64 = quad::LinearModel<f64>;

pub type Dataset32 = data::Dataset<f32>;
pub type Hyperparameters32 = kernels::Hyperparameters<f32>;
pub type FullGp32 = gp_full::FullGp<f32>;
pub type SparseGp32 = gp_sparse::SparseGp<f32>;
pub type OnlineSparseGp32 = gp_online::OnlineSparseGp<f32>;
pub type DualGp32 = gp_dual::DualGp<f32>;
pub type MpcConfig32 = mpc::MpcConfig<f32>;
pub type LinearModel32 = quad::LinearModel<f32>;
