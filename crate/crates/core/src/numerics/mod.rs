//! Dense `f64` tensors, the image operators the networks are built from, and
//! reverse-mode differentiation with a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod resample;
pub mod tensor;

pub use gradcheck::{gradcheck, gradcheck_multi, GradcheckOptions, GradcheckReport};
pub use graph::{BackwardRule, Gradients, Graph, Var};
pub use kernels::{conv2d, masked_product, pixel_shuffle, pixel_unshuffle};
pub use resample::{bicubic_resample, downsample4, Ratio};
pub use tensor::{concat_channels, ImageTensor, Tensor};
