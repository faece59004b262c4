//! Pose-graph SLAM backend for multi-hypothesis object-pose measurements.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod pose;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
