//! Routing-locality analysis for mixture-of-experts inference: routing
//! traces, locality metrics, expert-cache simulation, fetch-bound checks, a
//! softmax gate, and a locality-regularized router objective.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cache;
pub mod cli;
pub mod gate;
pub mod metrics;
pub mod objective;
pub mod trace;
