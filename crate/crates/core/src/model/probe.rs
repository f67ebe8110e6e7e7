//! Full-objective gradient probe for [`gradient_check`](crate::nn::gradient_check).

use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::Result;
use crate::model::{Vpe, VpeConfig};
use crate::nn::Checkable;
use crate::rng;
use crate::tensor::Tensor;

/// The training loss of a 64-bit model on a fixed batch and fixed noise,
/// with every weight, bias and the input image as variables.
#[derive(Clone, Debug)]
pub struct LossProbe {
    pub model: Vpe<f64>,
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
    pub eps: Tensor<f64>,
}

impl LossProbe {
    /// Random images in `[0.05, 0.95]`, random targets and noise.
    pub fn new(config: VpeConfig, batch: usize, seed: u64) -> Result<Self> {
        let model = Vpe::new(config.clone(), seed)?;
        let mut r = rng::stream(seed, "probe");
        let s = config.input_size;
        let pixels = Uniform::new(0.05, 0.95).expect("valid range");
        let mut draw = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| pixels.sample(&mut r)).collect())
        };
        let input = draw(&[batch, config.in_channels, s, s])?;
        let target = draw(&[batch, config.out_channels, s, s])?;
        let shape = [config.mc_samples, batch, config.latent_dim];
        let len = shape.iter().product();
        let eps = Tensor::from_vec(&shape, (0..len).map(|_| StandardNormal.sample(&mut r)).collect())?;
        Ok(LossProbe {
            model,
            input,
            target,
            eps,
        })
    }
}

impl Checkable for LossProbe {
    fn variable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .model
            .layers
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect();
        names.push("input".into());
        names
    }

    fn variable_mut(&mut self, index: usize) -> &mut [f64] {
        let layers = self.model.layers.len();
        if index == 2 * layers {
            return self.input.data_mut();
        }
        let layer = &mut self.model.layers[index / 2];
        if index % 2 == 0 {
            layer.weight.data_mut()
        } else {
            layer.bias.data_mut()
        }
    }

    fn loss(&mut self) -> f64 {
        self.model
            .loss(&self.input, &self.target, &self.eps, false)
            .expect("probe shapes are consistent")
            .total
    }

    fn gradients(&mut self) -> Vec<Vec<f64>> {
        self.model.zero_grad();
        let grad_input = self
            .model
            .loss_with_input_grad(&self.input, &self.target, &self.eps)
            .expect("probe shapes are consistent");
        let mut out: Vec<Vec<f64>> = self
            .model
            .layers
            .iter()
            .flat_map(|l| [l.grad_weight.data().to_vec(), l.grad_bias.data().to_vec()])
            .collect();
        out.push(grad_input.into_data());
        out
    }
}
