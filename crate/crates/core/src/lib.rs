//! Simulation and learning stack for a redundant musculoskeletal shoulder
//! complex: scapulohumeral-rhythm inverse kinematics, a learned
//! joint-muscle mapping, a quasi-static tendon-driven plant, object-relative
//! joint-angle estimation and a two-handed steering-wheel experiment.

pub mod error;
pub mod harness;
pub mod ik;
pub mod jmm;
pub mod kinematics;
pub mod muscle;
pub mod perception;
pub mod plant;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
