// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchor;
pub mod audit;
pub mod attention;
pub mod cost;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod landmarks;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Gradients, Tape, Tensor, Var};
