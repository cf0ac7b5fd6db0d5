//! Feedback networks: stacked ConvLSTM modules unrolled over iterations with a
//! loss at every iteration, plus taxonomic prediction, an episodic curriculum
//! and an analytic computation-graph depth model.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cell;
pub mod curriculum;
pub mod error;
pub mod graph;
pub mod network;
pub mod taxonomy;
pub mod tensor;

pub use error::{Error, Result};
pub mod harness;
