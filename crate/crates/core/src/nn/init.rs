use rand_distr::{Distribution, Normal};

use crate::nn::LayerParams;
use crate::rng;
use crate::tensor::{Float, Tensor};

/// Declarative description of one parameterized layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Linear {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::Linear { name, .. } | LayerSpec::BatchNorm { name, .. } => name,
        }
    }
}

fn he_normal<T: Float>(shape: &[usize], fan_in: usize, rng: &mut rng::Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive deviation");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Builds every layer in `arch`: weights are zero-mean normal with deviation
/// `sqrt(2 / fan_in)`, biases zero, batch-norm scale one and shift zero.
/// Each layer draws from its own seeded stream so the result depends only on
/// `seed` and the layer list.
pub fn init_params<T: Float>(arch: &[LayerSpec], seed: u64) -> Vec<LayerParams<T>> {
    arch.iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut r = rng::substream(seed, rng::INIT, i as u64);
            match spec {
                LayerSpec::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    LayerParams::new(
                        name.clone(),
                        he_normal(&[*out_channels, *in_channels, *kernel, *kernel], fan_in, &mut r),
                        Tensor::zeros(&[*out_channels]),
                    )
                }
                LayerSpec::Linear { name, inputs, outputs } => LayerParams::new(
                    name.clone(),
                    he_normal(&[*inputs, *outputs], *inputs, &mut r),
                    Tensor::zeros(&[*outputs]),
                ),
                LayerSpec::BatchNorm { name, channels } => LayerParams::batchnorm(name.clone(), *channels),
            }
        })
        .collect()
}
