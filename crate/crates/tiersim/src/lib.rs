//! Two-tier AI industry simulator.
//!
//! Upstream foundation-model firms accumulate intelligence capital from compute
//! and usage data, compete in a Logit API market and suffer rivalry-driven
//! depreciation. Downstream agent developers choose an architecture complexity
//! that sets their token demand, and accumulate orchestration capital that the
//! advancing frontier erodes.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod downstream;
pub mod engine;
pub mod error;
pub mod harness;
pub mod market;
pub mod upstream;
pub mod valuation;

pub use config::ScenarioConfig;
pub use engine::{run, SimulationTrace};
pub use error::ModelError;
