//! Hierarchical federated learning simulator with multi-timescale gradient
//! correction (MTGC), its ablations, and hierarchical FedAvg.
//!
//! The two-level engine lives in [`engine`], the M-level generalization in
//! [`multilevel`], and measured quantities in [`analysis`]. [`experiment`]
//! drives config-file runs and sweeps for the `mtgc` binary.

pub mod analysis;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod multilevel;
pub mod oracle;
pub mod param;
pub mod partition;
pub mod rng;
pub mod synth;
pub mod task;
pub mod topology;

pub use error::{Error, Result};
pub use param::ParamVector;
