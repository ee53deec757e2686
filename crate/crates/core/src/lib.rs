#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod control;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metric;
pub mod planner;
pub mod predictor;
pub mod rng;
pub(crate) mod serde_ext;
pub mod systems;
pub mod tube;

pub use error::{Error, Result};
