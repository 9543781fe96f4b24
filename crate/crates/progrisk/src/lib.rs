//! Progressive risk modeling for sequential-scan cohorts.
//!
//! The crate trains small feed-forward encoders to predict whether a knee
//! reaches total replacement within a horizon, given one or two feature
//! vectors taken at successive imaging visits. Risk for the later scan can be
//! conditioned on the earlier one so that predicted risk never decreases over
//! time; contrastive and ranking penalties on a shared encoder are provided
//! as alternatives. A synthetic cohort generator, nested cross-validation
//! with ensembling, and ranking metrics with bootstrap and paired
//! significance tests complete the pipeline; the `progrisk` binary in the
//! companion CLI crate drives it end to end.

pub mod cohortgen;
pub mod config;
pub mod cvharness;
pub mod exec;
pub mod gradnet;
pub mod metrics;
pub mod pipeline;
pub mod regularizers;
pub mod report;
pub mod riskform;
pub mod seed;
