//! Residual convolutional networks on a small CPU autodiff engine, with the
//! pieces of a two-phase transfer-learning and cross-validation workflow for
//! binary image screening.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod parallel;
pub mod resnet;
pub mod tensor;
pub mod trainer;

pub use tensor::{Element, Tensor, TensorError, Var};
