//! Multi-target tracking of semi-static objects across discrete locations.
//!
//! A Rao-Blackwellized particle filter samples data associations, jumps,
//! births and deaths with a blocked Gibbs sampler while Kalman filters carry
//! the continuous position and feature estimates. An EM loop re-estimates the
//! jump probability and noise covariances from the filter output.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod jump_prior;
pub mod kalman;
pub mod learning;
pub mod model;
pub mod parallel;
pub mod rbpf;
pub mod simulator;

pub use config::{Parameters, ScenarioConfig};
pub use error::{Error, Result};
