//! Federated optimization simulator with co-clipped adaptive weight decay.
//!
//! The crate is organized bottom-up:
//!
//! * [`numkit`]: parameter vectors, seeded random streams, finite differences
//! * [`models`]: loss/gradient oracles (linear, logistic, one-hidden-layer MLP)
//! * [`data`]: synthetic blobs, Dirichlet partitioning, client and batch sampling
//! * [`local_engine`]: schedules, step rules and the client-side loop
//! * [`server_engine`]: aggregation, server optimizers and round diagnostics
//! * [`config`]: the flat `key = value` experiment configuration
//! * [`experiment`]: the round loop, evaluation, metrics output and sweeps
//! * [`checks`]: the property suite behind the `check` subcommand

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod config;
pub mod data;
pub mod experiment;
pub mod local_engine;
pub mod models;
pub mod numkit;
pub mod server_engine;
