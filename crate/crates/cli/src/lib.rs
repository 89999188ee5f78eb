//! Command implementations behind the `biometry` binary.

// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod pipeline;
pub mod report;

pub use error::{CliError, Result};
