//! Closed-loop experiments for dual-GP model predictive control: offline
//! excitation and training, helix tracking missions under a wind switch,
//! metrics and logs.

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod log;
pub mod metrics;
pub mod mission;
pub mod reference;
pub mod selftest;

pub use config::{ExperimentConfig, Variant};
pub use error::{HarnessError, Result};
