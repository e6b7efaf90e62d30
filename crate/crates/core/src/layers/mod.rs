//! Differentiable network primitives recorded on the tape.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod crop;
pub mod dropout;
pub mod upsample;

pub use activation::{sigmoid, Activation};
pub use batchnorm::{BnState, Mode};
pub use conv::{conv3d_forward, conv_output_extent, ConvParams};
pub use crop::{crop_center_forward, crop_margins};
pub use dropout::{sample_mask, DropoutVariant};
pub use upsample::upsample_nn_forward;
