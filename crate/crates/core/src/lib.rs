//! Lattice immune-system simulation: epitope chemistry, rule-driven cells,
//! reaction-kinetics baseline, event logs and multiscale correlation analysis.

pub mod analysis;
pub mod chemistry;
pub mod clusters;
pub mod engine;
pub mod eventlog;
pub mod lattice;
pub mod meanfield;
pub mod model;
pub mod ode;
pub mod scalar;
pub mod scenario;
pub mod service;

pub use engine::{Census, Event, EventBody, TickReport, World};
pub use scalar::Real;

pub type KineticsParams64 = ode::KineticsParams<f64>;
pub type KineticsState64 = ode::KineticsState<f64>;
pub type Trajectory64 = ode::Trajectory<f64>;
