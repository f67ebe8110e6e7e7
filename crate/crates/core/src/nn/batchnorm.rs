use crate::error::{Error, Result};
use crate::nn::{LayerParams, RunningStats};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnOptions {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BnOptions {
    fn default() -> Self {
        BnOptions {
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Values the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    mode: BnMode,
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

/// Splits a tensor shape into (batch, channels, per-channel spatial size).
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("batchnorm", format!("rank {} input", shape.len())));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel normalization over batch and spatial axes.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running averages (the first batch seeds them directly); eval mode uses
/// the running averages and fails if none exist yet.
pub fn batchnorm<T: Float>(
    input: &Tensor<T>,
    params: &mut LayerParams<T>,
    mode: BnMode,
    opts: BnOptions,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, sp) = layout(input.shape())?;
    if params.weight.shape() != [c] || params.bias.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!("layer `{}` has {:?} channels, input has {c}", params.name, params.weight.shape()),
        ));
    }
    let count = n * sp;
    let eps = T::of(opts.epsilon);
    let x = input.data();
    let (mean, var) = match mode {
        BnMode::Train => {
            if count < 2 {
                return Err(Error::InvalidArgument(format!(
                    "batch norm `{}` needs at least 2 values per channel in train mode",
                    params.name
                )));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s = s + x[(b * c + ch) * sp..][..sp].iter().copied().sum::<T>();
                }
                let m = s / T::of(count as f64);
                let mut q = T::zero();
                for b in 0..n {
                    for &v in &x[(b * c + ch) * sp..][..sp] {
                        q = q + (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = q / T::of(count as f64);
            }
            let unbiased = T::of(count as f64 / (count - 1) as f64);
            let batch_var: Vec<T> = var.iter().map(|&v| v * unbiased).collect();
            match params.running.as_mut() {
                None => {
                    params.running = Some(RunningStats {
                        mean: Tensor::from_vec(&[c], mean.clone())?,
                        var: Tensor::from_vec(&[c], batch_var)?,
                    })
                }
                Some(r) => {
                    let mom = T::of(opts.momentum);
                    let keep = T::one() - mom;
                    for ch in 0..c {
                        r.mean.data_mut()[ch] = keep * r.mean.data()[ch] + mom * mean[ch];
                        r.var.data_mut()[ch] = keep * r.var.data()[ch] + mom * batch_var[ch];
                    }
                }
            }
            (mean, var)
        }
        BnMode::Eval => {
            let r = params
                .running
                .as_ref()
                .ok_or_else(|| Error::MissingRunningStats(params.name.clone()))?;
            (r.mean.data().to_vec(), r.var.data().to_vec())
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    {
        let xn = normalized.data_mut();
        let y = out.data_mut();
        let gamma = params.weight.data();
        let beta = params.bias.data();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                for i in off..off + sp {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xn[i] = h;
                    y[i] = gamma[ch] * h + beta[ch];
                }
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            mode,
            normalized,
            inv_std,
        },
    ))
}

pub fn batchnorm_backward<T: Float>(
    cache: &BatchNormCache<T>,
    params: &mut LayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::shape("batchnorm_backward", "upstream gradient shape"));
    }
    let (n, c, sp) = layout(grad_out.shape())?;
    let count = T::of((n * sp) as f64);
    let g = grad_out.data();
    let xn = cache.normalized.data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * sp;
            for i in off..off + sp {
                sum_g[ch] = sum_g[ch] + g[i];
                sum_gx[ch] = sum_gx[ch] + g[i] * xn[i];
            }
        }
    }
    for ch in 0..c {
        params.grad_weight.data_mut()[ch] = params.grad_weight.data()[ch] + sum_gx[ch];
        params.grad_bias.data_mut()[ch] = params.grad_bias.data()[ch] + sum_g[ch];
    }
    let gamma = params.weight.data();
    let mut grad_in = Tensor::zeros(grad_out.shape());
    let gi = grad_in.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * sp;
            let scale = gamma[ch] * cache.inv_std[ch];
            for i in off..off + sp {
                gi[i] = match cache.mode {
                    BnMode::Train => {
                        scale * (g[i] - sum_g[ch] / count - xn[i] * sum_gx[ch] / count)
                    }
                    BnMode::Eval => scale * g[i],
                };
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let x = Tensor::full(&[4, 2, 3, 3], 2.5f64);
        let mut p = LayerParams::batchnorm("bn", 2);
        let opts = BnOptions::default();
        let (y, _) = batchnorm(&x, &mut p, BnMode::Train, opts).unwrap();
        assert!(y.max_abs() <= opts.epsilon.sqrt());
    }

    #[test]
    fn zero_scale_collapses_to_shift() {
        let x = ramp(&[3, 2, 4, 4]);
        let mut p = LayerParams::batchnorm("bn", 2);
        p.weight.fill(0.0);
        p.bias.fill(5.0);
        let (y, _) = batchnorm(&x, &mut p, BnMode::Train, BnOptions::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn eval_without_statistics_is_rejected() {
        let x = ramp(&[2, 2, 2, 2]);
        let mut p = LayerParams::batchnorm("bn", 2);
        let err = batchnorm(&x, &mut p, BnMode::Eval, BnOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingRunningStats(ref n) if n == "bn"));
    }

    #[test]
    fn single_value_per_channel_rejected_in_train_mode() {
        let x = ramp(&[1, 3, 1, 1]);
        let mut p = LayerParams::batchnorm("bn", 3);
        assert!(batchnorm(&x, &mut p, BnMode::Train, BnOptions::default()).is_err());
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut p = LayerParams::batchnorm("bn", 1);
        let opts = BnOptions::default();
        let a = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0f64, 2.0]).unwrap();
        batchnorm(&a, &mut p, BnMode::Train, opts).unwrap();
        let r = p.running.clone().unwrap();
        assert_eq!(r.mean.data(), &[1.0]);
        assert_eq!(r.var.data(), &[2.0]);
        let b = Tensor::from_vec(&[2, 1, 1, 1], vec![10.0f64, 10.0]).unwrap();
        batchnorm(&b, &mut p, BnMode::Train, opts).unwrap();
        let r = p.running.unwrap();
        assert!((r.mean.data()[0] - 1.9).abs() < 1e-12);
        assert!((r.var.data()[0] - 1.8).abs() < 1e-12);
        assert!(r.var.data()[0] > 0.0);
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut p = LayerParams::batchnorm("bn", 1);
        p.running = Some(RunningStats {
            mean: Tensor::from_vec(&[1], vec![1.0f64]).unwrap(),
            var: Tensor::from_vec(&[1], vec![4.0 - 1e-5]).unwrap(),
        });
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let (y, _) = batchnorm(&x, &mut p, BnMode::Eval, BnOptions::default()).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }
}
