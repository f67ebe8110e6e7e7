//! Variational prototyping-encoder.
//!
//! A convolutional Gaussian encoder maps real-world symbol images to a latent
//! distribution, and a decoder translates samples of it back into the
//! canonical prototype image of the symbol's class. The latent mean then
//! serves as the embedding for one-shot nearest-neighbour classification and
//! retrieval against a support set of prototype embeddings.

pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod oneshot;
pub mod retrieval;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
