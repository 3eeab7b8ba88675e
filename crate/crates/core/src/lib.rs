//! Two-stage cascaded dense fully convolutional segmentation of the liver
//! and liver lesions in abdominal CT.
//!
//! The pipeline windows CT slices, segments the liver with a 2D dense FCN on
//! half-resolution slices, cleans the prediction with 3D morphology, then
//! segments lesions with a second three-window network and keeps only the
//! lesion voxels inside the liver. The [`metrics`] module scores results with
//! the usual overlap, surface-distance, lesion-detection and tumor-burden
//! measures.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pick the concrete types used by the command-line tools.

pub mod cascade;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod postprocess;
pub mod preprocess;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod volumes;
pub mod weightmap;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Scalar type used by the command-line tools.
pub type Real = f32;
/// Network in the command-line precision.
pub type Model = network::DenseFcn<Real>;
pub type ModelF64 = network::DenseFcn<f64>;
pub type Batch = training::Batch<Real>;
pub type Checkpoint = network::Checkpoint<Real>;
