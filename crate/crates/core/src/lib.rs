//! Differentiable structured channel pruning under microcontroller resource
//! budgets: model size, peak activation memory and MAC count.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod memplan;
pub mod nn;
pub mod par;
pub mod pruner;
pub mod resources;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
