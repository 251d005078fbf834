// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod harness;
pub mod lgm;
pub mod lm;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
