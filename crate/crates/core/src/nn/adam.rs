use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// One entry per parameter tensor, `<layer>.weight` then `<layer>.bias`,
    /// in layer order. Empty until the first step.
    pub moments: Vec<Moments<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    fn ensure_moments(&mut self, params: &[LayerParams<T>]) -> Result<()> {
        if self.moments.is_empty() {
            for p in params {
                for (suffix, t) in [("weight", &p.weight), ("bias", &p.bias)] {
                    self.moments.push(Moments {
                        name: format!("{}.{suffix}", p.name),
                        first: Tensor::zeros(t.shape()),
                        second: Tensor::zeros(t.shape()),
                    });
                }
            }
            return Ok(());
        }
        if self.moments.len() != 2 * params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} moment tensors for {} layers", self.moments.len(), params.len()),
            ));
        }
        for (p, pair) in params.iter().zip(self.moments.chunks(2)) {
            if pair[0].first.shape() != p.weight.shape() || pair[1].first.shape() != p.bias.shape() {
                return Err(Error::shape("adam_step", format!("moments do not match layer `{}`", p.name)));
            }
        }
        Ok(())
    }
}

impl<T: Float> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}

/// One bias-corrected Adam update over every layer, then clears gradients.
/// If any gradient is non-finite nothing is modified.
pub fn adam_step<T: Float>(params: &mut [LayerParams<T>], state: &mut AdamState<T>) -> Result<()> {
    for p in params.iter() {
        if !p.grad_weight.is_finite() || !p.grad_bias.is_finite() {
            return Err(Error::NonFinite(format!("gradient of layer `{}`", p.name)));
        }
    }
    state.ensure_moments(params)?;
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.epsilon));
    let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));

    let mut moments = state.moments.iter_mut();
    for p in params.iter_mut() {
        for (value, grad) in [(&mut p.weight, &p.grad_weight), (&mut p.bias, &p.grad_bias)] {
            let m = moments.next().expect("moment count checked");
            let iter = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.first.data_mut().iter_mut().zip(m.second.data_mut()));
            for ((w, &g), (m1, m2)) in iter {
                *m1 = b1 * *m1 + one_b1 * g;
                *m2 = b2 * *m2 + one_b2 * g * g;
                let mhat = *m1 * inv_bc1;
                let vhat = *m2 * inv_bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_layer(w: f64, g: f64) -> LayerParams<f64> {
        let mut p = LayerParams::new(
            "s",
            Tensor::from_vec(&[1], vec![w]).unwrap(),
            Tensor::zeros(&[1]),
        );
        p.grad_weight.data_mut()[0] = g;
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut layers = vec![scalar_layer(0.0, 1.0)];
        let mut state = AdamState::default();
        adam_step(&mut layers, &mut state).unwrap();
        assert!((layers[0].weight.data()[0] + 1e-4).abs() < 1e-7);
        assert_eq!(state.step, 1);
        assert_eq!(layers[0].grad_weight.data(), &[0.0]);
    }

    #[test]
    fn zero_gradient_is_noop_but_counts() {
        let mut layers = vec![scalar_layer(0.75, 0.0)];
        let mut state = AdamState::default();
        adam_step(&mut layers, &mut state).unwrap();
        assert_eq!(layers[0].weight.data(), &[0.75]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn nan_gradient_aborts_without_changes() {
        let mut layers = vec![scalar_layer(0.5, 1.0), scalar_layer(0.5, f64::NAN)];
        layers[1].name = "bad".into();
        let mut state = AdamState::default();
        let err = adam_step(&mut layers, &mut state).unwrap_err().to_string();
        assert!(err.contains("bad"), "{err}");
        assert_eq!(layers[0].weight.data(), &[0.5]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn matches_scalar_reference_trace() {
        // Hand-rolled scalar Adam, independent of the tensor code path.
        fn reference(w0: f64, grads: &[f64]) -> Vec<f64> {
            let (lr, b1, b2, eps) = (1e-4, 0.9f64, 0.999f64, 1e-8);
            let (mut m, mut v, mut w) = (0.0, 0.0, w0);
            let mut trace = Vec::new();
            for (i, &g) in grads.iter().enumerate() {
                let t = (i + 1) as i32;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t));
                let vh = v / (1.0 - b2.powi(t));
                let before = w;
                w -= lr * mh / (vh.sqrt() + eps);
                trace.push(w - before);
            }
            trace
        }
        let grads = [0.3, 0.3];
        let expected = reference(1.0, &grads);
        let mut layers = vec![scalar_layer(1.0, 0.0)];
        let mut state = AdamState::default();
        for (i, &g) in grads.iter().enumerate() {
            let before = layers[0].weight.data()[0];
            layers[0].grad_weight.data_mut()[0] = g;
            adam_step(&mut layers, &mut state).unwrap();
            let delta = layers[0].weight.data()[0] - before;
            assert!((delta - expected[i]).abs() < 1e-15, "step {i}: {delta} vs {}", expected[i]);
        }
    }
}
