//! Minimal dense tensors plus reverse-mode automatic differentiation for
//! small feed-forward and convolutional networks, with first-class support
//! for per-example gradients.

pub mod graph;
pub mod params;
pub mod per_example;
pub mod tensor;

pub use graph::{backward, forward, predict, softmax_rows, DropoutMode, Layer, ModelGraph, StepKey, Tape};
pub use params::{LayoutEntry, ParamLayout, ParamVector};
pub use per_example::{batch_gradient, per_example_gradients, PerExampleGrads};
pub use tensor::Tensor;
