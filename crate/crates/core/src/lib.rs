//! Agent-based supermarket crowd simulation with collision statistics,
//! basket-driven shopping trajectories, torus dynamics and experiment sweeps.

pub mod basket;
pub mod cli;
pub mod collision;
pub mod experiment;
pub mod layout;
pub mod sim;
pub mod stats;
pub mod torus;
