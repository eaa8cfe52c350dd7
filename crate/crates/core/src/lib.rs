//! Liquid time-constant cells on sparse neural-circuit wirings, an LSTM
//! baseline, and the tooling to compare them on energy-estimation data:
//! data preparation, truncated-BPTT training, metrics, robustness
//! perturbations, cost accounting and grid sweeps.

pub mod accounting;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod lstm;
pub mod ltc;
pub mod metrics;
pub mod model;
pub mod robustness;
pub mod trainer;
pub mod wiring;

pub use error::{Error, Result};
