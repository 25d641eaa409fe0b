//! Multiscale-consistency self-supervised pretraining for volumetric EM-like
//! data, with the downstream affinity → watershed → agglomeration segmentation
//! path and its evaluation metrics.
//!
//! The numeric stack (tensors, backbone, losses, optimizer) is generic over
//! the scalar type: f32 for training and checkpoints, f64 for finite-difference
//! gradient verification.

pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod losses;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use scalar::Scalar;
pub use tensor::Tensor;
pub use volume::{LabelVolume, Volume};

/// Concrete tensor aliases for the two supported scalar types.
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
