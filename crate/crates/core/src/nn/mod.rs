//! A small convolutional encoder-decoder with hand-written backpropagation.
//!
//! Activations are stored channel-major as `C × (N·H·W)` matrices so every
//! convolution is one im2col followed by one matrix product over the whole
//! batch.

mod adam;
mod layers;
mod segnet;

pub use adam::Adam;
pub use layers::{Act, BatchNorm, Conv};
pub use segnet::SegNet;
