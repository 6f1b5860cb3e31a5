//! Minimal tensor and reverse-mode differentiation engine for small
//! feed-forward convnets.

mod kernels;
mod network;
mod tensor;

pub(crate) use kernels::sigmoid;
pub use network::{finite_difference_gradient, BackwardMode, LayerSpec, Network, ParamGrads, Tape};
pub use tensor::Tensor;
