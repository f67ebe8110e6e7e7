//! Forward/backward kernels for the layers the encoder and decoder are built
//! from, plus initialization, Adam and the finite-difference checker.
//!
//! Kernels are free functions. A forward call returns its output (and a cache
//! when the backward pass needs more than the input); the paired backward call
//! accumulates parameter gradients into [`LayerParams`] and returns the
//! gradient with respect to the input.

mod activation;
mod adam;
mod batchnorm;
mod conv;
pub mod gradcheck;
mod init;
mod linear;
mod params;
mod upsample;

pub use activation::{leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward};
pub use adam::{adam_step, AdamConfig, AdamState, Moments};
pub use batchnorm::{batchnorm, batchnorm_backward, BatchNormCache, BnMode, BnOptions};
pub use conv::{conv2d, conv2d_backward, conv_output_extent};
pub use gradcheck::{gradient_check, Checkable, GradCheckOptions, GradCheckReport};
pub use init::{init_params, LayerSpec};
pub use linear::{fully_connected, fully_connected_backward};
pub use params::{LayerParams, RunningStats};
pub use upsample::{upsample2x, upsample2x_backward};
