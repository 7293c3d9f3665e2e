//! Learned particle simulation with attention-head instrumentation.
//!
//! A damped-spring disc simulator generates training data for a small
//! transformer that predicts the next particle state. The crate then measures
//! how individual attention heads come to detect collisions, estimates
//! weight-restricted local learning coefficients with SGLD, and fits power
//! laws to the development curves.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod llc;
pub mod metrics;
pub mod model;
pub mod powerlaw;
pub mod seeds;
pub mod sim;
pub mod theory;
pub mod train;
