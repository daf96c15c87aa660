//! Bike-fleet mobile sensing: road networks, trip logs, fleet replay,
//! visit-probability estimation, sensor allocation and coverage scoring.

pub mod allocation;
pub mod coverage_model;
pub mod error;
pub mod fleet_sim;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod stats;
pub mod synth;
pub mod trips;

pub use error::{Error, Result};
