//! The prototype-decoding variational network, its objective and training.

mod checkpoint;
mod config;
mod loss;
mod network;
mod probe;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_lines, ConvStage, TargetMode, VpeConfig};
pub use loss::{bce, kl_divergence, reconstruction_loss, CLAMP};
pub use network::{reparameterize_batch, LossBreakdown, Vpe};
pub use probe::LossProbe;
pub use train::{smoothed_loss, Batch, LossRecord, TrainConfig, Trainer, TrainingSet};

use crate::error::{Error, Result};
use crate::nn::BnMode;
use crate::tensor::{Float, Tensor};

/// Diagonal Gaussian posterior for a batch: mean and log-variance, both
/// `[N, latent_dim]`, and optionally a reparameterized draw.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent<T> {
    pub mean: Tensor<T>,
    pub log_variance: Tensor<T>,
    pub sample: Option<Tensor<T>>,
}

impl<T: Float> GaussianLatent<T> {
    pub fn new(mean: Tensor<T>, log_variance: Tensor<T>) -> Result<Self> {
        if mean.shape() != log_variance.shape() || mean.rank() != 2 {
            return Err(Error::shape(
                "latent",
                format!("mean {:?} vs log-variance {:?}", mean.shape(), log_variance.shape()),
            ));
        }
        Ok(GaussianLatent {
            mean,
            log_variance,
            sample: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.mean.shape()[0]
    }

    /// `z = mean + exp(log_variance / 2) * eps`, recorded in `sample`.
    pub fn reparameterize(&mut self, eps: &Tensor<T>) -> Result<&Tensor<T>> {
        if eps.len() != self.mean.len() {
            return Err(Error::shape(
                "reparameterize",
                format!("noise {:?} vs latent {:?}", eps.shape(), self.mean.shape()),
            ));
        }
        let z = reparameterize_batch(self, eps)?;
        Ok(self.sample.insert(z))
    }
}

/// Latent means of `x` in eval mode, computed in chunks of `chunk` images.
pub fn embed<T: Float>(model: &mut Vpe<T>, x: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
    let n = x.shape().first().copied().unwrap_or(0);
    let l = model.config.latent_dim;
    let mut out = Vec::with_capacity(n * l);
    let chunk = chunk.max(1);
    let per: usize = x.shape()[1..].iter().product();
    let mut start = 0;
    while start < n {
        let count = chunk.min(n - start);
        let mut shape = x.shape().to_vec();
        shape[0] = count;
        let part = Tensor::from_vec(&shape, x.data()[start * per..(start + count) * per].to_vec())?;
        out.extend_from_slice(model.encode(&part, BnMode::Eval)?.mean.data());
        start += count;
    }
    Tensor::from_vec(&[n, l], out)
}
