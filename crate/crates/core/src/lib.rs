//! Event-based GRU (EGRU) language models with activity-sparse inference,
//! surrogate-gradient training, global magnitude pruning and exact
//! multiply-accumulate accounting.

// `!(x > 0.0)` also rejects NaN, and index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod egru;
pub mod error;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
