use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// One layer's trainable tensors and their gradient accumulators.
///
/// For batch norm, `weight` is the per-channel scale and `bias` the shift,
/// and `running` holds the inference statistics once a training pass has
/// populated them.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    pub running: Option<RunningStats<T>>,
}

impl<T: Float> LayerParams<T> {
    pub fn new(name: impl Into<String>, weight: Tensor<T>, bias: Tensor<T>) -> Self {
        let grad_weight = Tensor::zeros(weight.shape());
        let grad_bias = Tensor::zeros(bias.shape());
        LayerParams {
            name: name.into(),
            weight,
            bias,
            grad_weight,
            grad_bias,
            running: None,
        }
    }

    /// Batch-norm parameters: unit scale, zero shift, no statistics yet.
    pub fn batchnorm(name: impl Into<String>, channels: usize) -> Self {
        Self::new(name, Tensor::ones(&[channels]), Tensor::zeros(&[channels]))
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(T::zero());
        self.grad_bias.fill(T::zero());
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Float>(&self) -> LayerParams<U> {
        LayerParams {
            name: self.name.clone(),
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            grad_weight: self.grad_weight.cast(),
            grad_bias: self.grad_bias.cast(),
            running: self.running.as_ref().map(|r| RunningStats {
                mean: r.mean.cast(),
                var: r.var.cast(),
            }),
        }
    }
}
