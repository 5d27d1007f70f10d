//! State-space language model lab: diagonal and gated SSM layers with three
//! equivalent evaluation paths, carried hidden states between batches,
//! length-extension evaluation, memory-kernel fitting and overflow budgets.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod carry;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod kernellab;
pub mod models;
pub mod ndcore;
pub mod provenance;
pub mod ssm;
pub mod stability;
pub mod train;

pub use error::{Error, Result};
