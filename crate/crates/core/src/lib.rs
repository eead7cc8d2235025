//! LASER attention and the machinery around it: a small tape-based autodiff
//! engine, standard / LASER / diff attention variants, softmax-saturation
//! analysis, a decoder-only language model and its training loop.

pub mod analysis;
pub mod attention;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use attention::{AttentionSpec, Variant};
pub use tensor::{DType, Graph, Scalar, Tensor, TensorError, Var};
