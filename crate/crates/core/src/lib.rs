//! Mobility-aware asynchronous federated learning simulator.
//!
//! Devices move in and out of contact with a mobile edge server, train
//! locally, and upload top-k sparsified updates with error feedback whenever
//! they are in range. The server aggregates asynchronously. Upload size and
//! transmit power are chosen per contact by a drift-plus-penalty controller
//! with virtual energy queues, or by one of the baseline policies.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod controller;
pub mod error;
pub mod experiment;
pub mod mobility;
pub mod oracle;
pub mod protocol;
pub mod rng;
pub mod sparsify;
pub mod theory;
pub mod validation;
pub mod workloads;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use experiment::{emit, run_experiment, run_sweep, MetricsTable};
pub use sparsify::GradientVector;
