//! Nonasymptotic confidence intervals for the average treatment effect in
//! randomized experiments.
//!
//! The crate covers three designs (Bernoulli, complete, and mini-batch
//! complete randomization), the matching Horvitz-Thompson estimators, a
//! family of interval constructions, and a deterministic Monte Carlo harness
//! for studying their coverage and width.

pub mod cli;
pub mod design;
pub mod dgp;
pub mod estimator;
pub mod harness;
pub mod interval;
pub mod perm;
pub mod rng;

pub use design::{compute_layout, Assignment, DesignError, DesignParams, MbcrLayout, Scheme};
pub use estimator::{EstimateVariant, ObservedData, PotentialTable};
pub use interval::{Interval, Method};

/// Version of the report and JSON output formats.
pub const SCHEMA_VERSION: u32 = 1;
