//! Consensus-based optimization and ensemble Kalman inversion for
//! constrained problems, with the penalty and relaxation terms shared by both.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbo;
pub mod config;
pub mod constraints;
pub mod diagnostics;
pub mod eki;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod problems;
pub mod rng;
mod serde_inf;

pub use error::{Error, Result};
