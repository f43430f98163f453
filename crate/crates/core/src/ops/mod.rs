//! Differentiable operations on [`Graph`](crate::graph::Graph) variables.

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod resample;
mod shape;

pub use norm::{softmax_temp, Axis};
pub use resample::UpsampleMode;

pub use resample::{upsample_tensor, warp_tensor};
