//! A small convolutional network stack: tensors, tape autodiff, the U-Net,
//! Adam and the checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod ops;
mod real;
mod tensor;
pub mod unet;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
pub use unet::{ForwardPass, UNet, UNetConfig};

/// Whether batch norm uses batch statistics and dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
