//! Parallel fast/slow decision making for autonomous-vehicle interactions
//! with human-driven vehicles.

pub mod environment;
pub mod hv_driver;
pub mod model;
pub mod snapshot;
pub mod reasoner;
pub mod memory;
pub mod runtime;
pub mod evaluation;
