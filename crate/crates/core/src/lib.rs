//! Discrete-event simulation of rank-based load-balancing schemes on banks
//! of exchangeable servers, with exact coupling between schemes, solvers for
//! the associated fluid ODE and reflected diffusion SDE, and a config-driven
//! experiment harness that checks ordering invariants and scaling-limit
//! agreement at desk scale.

pub mod diffusion;
pub mod experiment;
pub mod fluid;
pub mod occupancy;
pub mod policy;
pub mod report;
pub mod rng;
pub mod rules;
pub mod sim;
pub mod stats;
