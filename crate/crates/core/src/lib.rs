//! Batch off-policy evaluation for tabular treatment policies learned from
//! observational patient trajectories.

pub mod data;
pub mod diagnostics;
pub mod estimators;
pub mod harness;
pub mod policies;
pub mod representation;
pub mod simulator;
pub mod stats;
