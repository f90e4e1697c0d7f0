//! Deterministic simulator for cross-silo federated training of a shared
//! backbone with private per-party classifier heads.
//!
//! Local training can apply a server-estimated global momentum (PFM), and
//! aggregation weights can be tuned online by validation-driven search (FV).

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod fv;
pub mod model;
pub mod params;
pub mod rng;
pub mod sim;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use params::ParamVec;
pub use sim::Method;
