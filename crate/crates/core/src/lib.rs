//! Two-step information-theoretic dynamic probabilistic CCA for paired
//! sequences, with single-stream bottleneck and state-space baselines,
//! synthetic Hénon benchmarks and evaluation metrics.

pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod params;
pub mod tape;

pub use error::{Error, Result};
