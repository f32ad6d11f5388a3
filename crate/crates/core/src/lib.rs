//! Dispatch of thermostatic flexible loads on radial low-voltage grids.

pub mod algorithms;
pub mod devices;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod num;
pub mod powerflow;
pub mod scenarios;
pub mod scheduling;

pub use error::{Error, Result};
pub use num::Scalar;

/// Scalar used by the scheduling, scenario and experiment layers.
pub type Real = f64;

pub type DeviceParams = devices::DeviceParams<Real>;
pub type Trajectory = devices::Trajectory<Real>;
pub type BusLoad = powerflow::BusLoad<Real>;
pub type PowerFlowModel = powerflow::PowerFlowModel<Real>;
pub type PowerFlowOptions = powerflow::PowerFlowOptions<Real>;
pub type PowerFlowSolution = powerflow::PowerFlowSolution<Real>;
