//! Union-of-Experts transformer components.
//!
//! A dense transformer block is split losslessly into expert slices
//! (column/row partitions of the attention and MLP weights). Experts are fed
//! either a routed subset of each sample's patches (data selection) or a
//! routed subset of the batch (expert selection), and their outputs are
//! written back with one scatter-add that also carries the residual path.

pub mod attention;
pub mod decomposition;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod mlp_experts;
pub mod model;
pub mod rng;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
