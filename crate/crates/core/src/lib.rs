//! Convolutional variational autoencoder for angiography volumes, trained on
//! 2D patches with a voxelwise L2 or a structural-similarity loss.
//!
//! The crate carries its own small reverse-mode differentiation engine
//! ([`tape`]), the model ([`model`]), training ([`train`]), slice-wise
//! whole-volume reconstruction and SSIM anomaly maps ([`inference`]),
//! evaluation metrics ([`evaluate`]), preprocessing, NIfTI-1 I/O and a
//! synthetic vessel phantom generator.

pub mod checkpoint;
pub mod conv;
pub mod evaluate;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod nifti;
pub mod objectives;
pub mod parallel;
pub mod phantom;
pub mod preprocess;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volume;

pub use conv::{ConvSpec, Window};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Shape4, Tensor4, TensorError};
