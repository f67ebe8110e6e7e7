//! Encoder, reparameterization and decoder with hand-written backward passes.

use crate::error::{Error, Result};
use crate::model::loss::{bce, bce_grad, kl_divergence, kl_grad};
use crate::model::{GaussianLatent, VpeConfig};
use crate::nn::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, fully_connected, fully_connected_backward, init_params,
    leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, upsample2x, upsample2x_backward, BatchNormCache,
    BnMode, LayerParams,
};
use crate::tensor::{Float, Tensor};

// Positions in `Vpe::layers`, matching `VpeConfig::architecture`.
const ENC_CONV: [usize; 3] = [0, 2, 4];
const ENC_BN: [usize; 3] = [1, 3, 5];
const FC_MU: usize = 6;
const FC_LOGVAR: usize = 7;
const DEC_FC: usize = 8;
const DEC_CONV: [usize; 3] = [9, 11, 13];
const DEC_BN: [usize; 3] = [10, 12, 14];

/// Batch-mean loss and its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
struct Block<T> {
    input: Tensor<T>,
    normalized: Tensor<T>,
    cache: BatchNormCache<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    blocks: Vec<Block<T>>,
    flat: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderTrace<T> {
    blocks: Vec<Block<T>>,
    z: Tensor<T>,
    output: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vpe<T> {
    pub config: VpeConfig,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Float> Vpe<T> {
    pub fn new(config: VpeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = init_params(&config.architecture(), seed);
        Ok(Vpe { config, layers })
    }

    pub fn from_layers(config: VpeConfig, layers: Vec<LayerParams<T>>) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture();
        let reference: Vec<LayerParams<T>> = init_params(&arch, 0);
        if layers.len() != reference.len() {
            return Err(Error::Format(format!(
                "expected {} layers, found {}",
                reference.len(),
                layers.len()
            )));
        }
        for (got, want) in layers.iter().zip(&reference) {
            if got.name != want.name
                || got.weight.shape() != want.weight.shape()
                || got.bias.shape() != want.bias.shape()
            {
                return Err(Error::Format(format!(
                    "layer `{}` {:?} does not match expected `{}` {:?}",
                    got.name,
                    got.weight.shape(),
                    want.name,
                    want.weight.shape()
                )));
            }
        }
        Ok(Vpe { config, layers })
    }

    pub fn cast<U: Float>(&self) -> Vpe<U> {
        Vpe {
            config: self.config.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(|l| l.zero_grad());
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.num_parameters()).sum()
    }

    /// True once every batch-norm layer has running statistics.
    pub fn has_running_stats(&self) -> bool {
        ENC_BN
            .iter()
            .chain(&DEC_BN)
            .all(|&i| self.layers[i].running.is_some())
    }

    fn slope(&self) -> T {
        T::of(self.config.leaky_slope)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        match *x.shape() {
            [_, c, h, w] if c == self.config.in_channels && h == s && w == s => Ok(()),
            _ => Err(Error::shape(
                "encode",
                format!(
                    "expected [N, {}, {s}, {s}], got {:?}",
                    self.config.in_channels,
                    x.shape()
                ),
            )),
        }
    }

    /// Encoder forward returning the trace needed for backward.
    pub fn encode_traced(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(GaussianLatent<T>, EncoderTrace<T>)> {
        self.check_input(x)?;
        let opts = self.config.bn_options();
        let slope = self.slope();
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(3);
        for stage in 0..3 {
            let kernel = self.config.encoder[stage].kernel;
            let pad = self.config.encoder_padding(kernel);
            let a = conv2d(&h, &self.layers[ENC_CONV[stage]], 2, pad)?;
            let (b, cache) = batchnorm(&a, &mut self.layers[ENC_BN[stage]], mode, opts)?;
            let next = leaky_relu(&b, slope);
            blocks.push(Block {
                input: h,
                normalized: b,
                cache,
            });
            h = next;
        }
        let n = x.shape()[0];
        let flat = h.reshape(&[n, self.config.flat_features()])?;
        let mean = fully_connected(&flat, &self.layers[FC_MU])?;
        let log_variance = fully_connected(&flat, &self.layers[FC_LOGVAR])?;
        Ok((
            GaussianLatent {
                mean,
                log_variance,
                sample: None,
            },
            EncoderTrace { blocks, flat },
        ))
    }

    /// Latent mean and log-variance for a batch. Eval mode uses running
    /// batch-norm statistics and is deterministic.
    pub fn encode(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<GaussianLatent<T>> {
        Ok(self.encode_traced(x, mode)?.0)
    }

    /// Gradient of the loss w.r.t. mean and log-variance into the encoder.
    pub fn encode_backward(
        &mut self,
        trace: &EncoderTrace<T>,
        grad_mean: &Tensor<T>,
        grad_log_variance: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = fully_connected_backward(&trace.flat, &mut self.layers[FC_MU], grad_mean)?;
        let g2 = fully_connected_backward(&trace.flat, &mut self.layers[FC_LOGVAR], grad_log_variance)?;
        g.add_assign(&g2)?;
        let last = &trace.blocks[2].normalized;
        let mut g = g.reshape(last.shape())?;
        let slope = self.slope();
        for stage in (0..3).rev() {
            let block = &trace.blocks[stage];
            let kernel = self.config.encoder[stage].kernel;
            let pad = self.config.encoder_padding(kernel);
            let gl = leaky_relu_backward(&block.normalized, &g, slope);
            let gb = batchnorm_backward(&block.cache, &mut self.layers[ENC_BN[stage]], &gl)?;
            g = conv2d_backward(&block.input, &mut self.layers[ENC_CONV[stage]], 2, pad, &gb)?;
        }
        Ok(g)
    }

    pub fn decode_traced(&mut self, z: &Tensor<T>, mode: BnMode) -> Result<DecoderTrace<T>> {
        let l = self.config.latent_dim;
        let m = match *z.shape() {
            [m, d] if d == l => m,
            _ => return Err(Error::shape("decode", format!("expected [M, {l}], got {:?}", z.shape()))),
        };
        let opts = self.config.bn_options();
        let slope = self.slope();
        let e = self.config.bottleneck_extent();
        let ch = self.config.decoder_channels();
        let mut d = fully_connected(z, &self.layers[DEC_FC])?.reshape(&[m, ch[0], e, e])?;
        let pad = (self.config.decoder_kernel - 1) / 2;
        let mut blocks = Vec::with_capacity(3);
        for stage in 0..3 {
            let up = upsample2x(&d)?;
            let a = conv2d(&up, &self.layers[DEC_CONV[stage]], 1, pad)?;
            let (b, cache) = batchnorm(&a, &mut self.layers[DEC_BN[stage]], mode, opts)?;
            d = leaky_relu(&b, slope);
            blocks.push(Block {
                input: up,
                normalized: b,
                cache,
            });
        }
        let output = sigmoid(&d);
        Ok(DecoderTrace {
            blocks,
            z: z.clone(),
            output,
        })
    }

    /// Decoded images in (0, 1), shape `[M, out_channels, S, S]`.
    pub fn decode(&mut self, z: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        Ok(self.decode_traced(z, mode)?.output)
    }

    /// Returns the gradient w.r.t. `z` given the gradient w.r.t. the output.
    pub fn decode_backward(&mut self, trace: &DecoderTrace<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let slope = self.slope();
        let pad = (self.config.decoder_kernel - 1) / 2;
        let mut g = sigmoid_backward(&trace.output, grad_output);
        for stage in (0..3).rev() {
            let block = &trace.blocks[stage];
            let gl = leaky_relu_backward(&block.normalized, &g, slope);
            let gb = batchnorm_backward(&block.cache, &mut self.layers[DEC_BN[stage]], &gl)?;
            let gu = conv2d_backward(&block.input, &mut self.layers[DEC_CONV[stage]], 1, pad, &gb)?;
            g = upsample2x_backward(&gu)?;
        }
        let m = trace.z.shape()[0];
        let g = g.reshape(&[m, self.config.flat_features()])?;
        fully_connected_backward(&trace.z, &mut self.layers[DEC_FC], &g)
    }

    /// Training objective on a paired batch with explicit noise
    /// `eps` of shape `[S, N, latent_dim]`. When `backward` is set, parameter
    /// gradients are accumulated (callers zero them first).
    ///
    /// Loss = mean over the batch of (mean over the S samples of the summed
    /// pixel BCE against `target`) + kl_weight * KL.
    pub fn loss(
        &mut self,
        input: &Tensor<T>,
        target: &Tensor<T>,
        eps: &Tensor<T>,
        backward: bool,
    ) -> Result<LossBreakdown> {
        Ok(self.loss_impl(input, target, eps, backward)?.0)
    }

    /// Accumulates parameter gradients like [`Vpe::loss`] and also returns
    /// the gradient with respect to `input`.
    pub fn loss_with_input_grad(&mut self, input: &Tensor<T>, target: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.loss_impl(input, target, eps, true)?.1.expect("backward requested"))
    }

    fn loss_impl(
        &mut self,
        input: &Tensor<T>,
        target: &Tensor<T>,
        eps: &Tensor<T>,
        backward: bool,
    ) -> Result<(LossBreakdown, Option<Tensor<T>>)> {
        let n = input.shape().first().copied().unwrap_or(0);
        let s = self.config.mc_samples;
        let l = self.config.latent_dim;
        let size = self.config.input_size;
        let tshape = [n, self.config.out_channels, size, size];
        if target.shape() != tshape {
            return Err(Error::shape(
                "loss",
                format!("target {:?} does not match decoder output {tshape:?}", target.shape()),
            ));
        }
        if eps.shape() != [s, n, l] {
            return Err(Error::shape(
                "loss",
                format!("noise {:?}, expected {:?}", eps.shape(), [s, n, l]),
            ));
        }
        let (latent, enc_trace) = self.encode_traced(input, BnMode::Train)?;
        let z = reparameterize_batch(&latent, eps)?;
        let dec_trace = self.decode_traced(&z, BnMode::Train)?;

        let per_image: usize = tshape[1..].iter().product();
        let pred = dec_trace.output.data();
        let tgt = target.data();
        let mut recon = 0.0f64;
        for k in 0..s {
            for i in 0..n {
                let p = &pred[(k * n + i) * per_image..][..per_image];
                let t = &tgt[i * per_image..][..per_image];
                recon += bce(p, t);
            }
        }
        recon /= (s * n) as f64;
        let kl_each = kl_divergence(&latent);
        let kl = kl_each.iter().sum::<f64>() / n as f64;
        let w = self.config.kl_weight;
        let breakdown = LossBreakdown {
            total: recon + w * kl,
            recon,
            kl,
        };
        if !backward {
            return Ok((breakdown, None));
        }

        let scale = T::of(1.0 / (s * n) as f64);
        let mut grad_out = Tensor::zeros(dec_trace.output.shape());
        {
            let go = grad_out.data_mut();
            for k in 0..s {
                for i in 0..n {
                    let off = (k * n + i) * per_image;
                    bce_grad(
                        &pred[off..off + per_image],
                        &tgt[i * per_image..][..per_image],
                        scale,
                        &mut go[off..off + per_image],
                    );
                }
            }
        }
        let grad_z = self.decode_backward(&dec_trace, &grad_out)?;
        let (mut grad_mean, mut grad_logvar) = kl_grad(&latent, T::of(w / n as f64));
        let half = T::of(0.5);
        {
            let gm = grad_mean.data_mut();
            let gv = grad_logvar.data_mut();
            let lv = latent.log_variance.data();
            let e = eps.data();
            let gz = grad_z.data();
            for k in 0..s {
                for j in 0..n * l {
                    let dz = gz[k * n * l + j];
                    gm[j] = gm[j] + dz;
                    gv[j] = gv[j] + dz * e[k * n * l + j] * half * (half * lv[j]).exp();
                }
            }
        }
        let grad_input = self.encode_backward(&enc_trace, &grad_mean, &grad_logvar)?;
        Ok((breakdown, Some(grad_input)))
    }

    /// Forward in train mode to populate batch-norm running statistics
    /// without touching any trainable parameter.
    pub fn calibrate_batchnorm(&mut self, input: &Tensor<T>) -> Result<()> {
        let latent = self.encode(input, BnMode::Train)?;
        self.decode(&latent.mean, BnMode::Train)?;
        Ok(())
    }
}

/// `z = mean + exp(log_variance / 2) * eps` for each of the S noise draws,
/// stacked sample-major into `[S * N, L]`.
pub fn reparameterize_batch<T: Float>(latent: &GaussianLatent<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, l) = match *latent.mean.shape() {
        [n, l] => (n, l),
        _ => return Err(Error::shape("reparameterize", "latent must be [N, L]")),
    };
    let s = eps.len() / (n * l).max(1);
    if eps.len() != s * n * l || s == 0 {
        return Err(Error::shape("reparameterize", format!("noise {:?} vs latent [{n}, {l}]", eps.shape())));
    }
    let mu = latent.mean.data();
    let lv = latent.log_variance.data();
    let half = T::of(0.5);
    let data = eps
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &e)| {
            let j = idx % (n * l);
            mu[j] + (half * lv[j]).exp() * e
        })
        .collect();
    Tensor::from_vec(&[s * n, l], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvStage, LossProbe, TargetMode};
    use crate::nn::{gradient_check, GradCheckOptions};

    fn toy() -> Vpe<f32> {
        Vpe::new(VpeConfig::toy(), 1).unwrap()
    }

    fn images(n: usize, seed: u32) -> Tensor<f32> {
        let len = n * 3 * 16 * 16;
        let data = (0..len)
            .map(|i| ((i as u32).wrapping_mul(2_654_435_761).wrapping_add(seed) % 1000) as f32 / 999.0)
            .collect();
        Tensor::from_vec(&[n, 3, 16, 16], data).unwrap()
    }

    #[test]
    fn encode_shapes_and_finiteness() {
        let mut m = toy();
        let x = images(4, 0);
        let latent = m.encode(&x, BnMode::Train).unwrap();
        assert_eq!(latent.mean.shape(), &[4, 300]);
        assert_eq!(latent.log_variance.shape(), &[4, 300]);
        assert!(latent.mean.is_finite() && latent.log_variance.is_finite());
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let mut m = toy();
        assert!(m.encode(&Tensor::zeros(&[1, 3, 32, 32]), BnMode::Train).is_err());
    }

    #[test]
    fn eval_mode_needs_statistics_then_is_deterministic() {
        let mut m = toy();
        let x = images(3, 1);
        assert!(m.encode(&x, BnMode::Eval).is_err());
        m.calibrate_batchnorm(&x).unwrap();
        let pair = Tensor::stack(&[x.item(0), x.item(0)]).unwrap();
        let latent = m.encode(&pair, BnMode::Eval).unwrap();
        let l = latent.dim();
        assert_eq!(latent.mean.data()[..l], latent.mean.data()[l..]);
        let z = latent.mean.clone();
        let a = m.decode(&z, BnMode::Eval).unwrap();
        let b = m.decode(&z, BnMode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 3, 16, 16]);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn loss_is_finite_and_positive_at_init() {
        let mut m = toy();
        let x = images(4, 2);
        let t = images(4, 3);
        let eps = Tensor::zeros(&[1, 4, 300]);
        let loss = m.loss(&x, &t, &eps, true).unwrap();
        assert!(loss.total.is_finite() && loss.total > 0.0);
        assert!(loss.total >= loss.kl - 1e-12);
        assert!(m.layers.iter().all(|l| l.grad_weight.is_finite()));
    }

    #[test]
    fn zero_kl_weight_and_half_output_gives_fair_coin_entropy() {
        let mut cfg = VpeConfig::toy();
        cfg.kl_weight = 0.0;
        let mut m = Vpe::<f64>::new(cfg, 5).unwrap();
        // Freeze the decoder at 0.5: zero final scale and shift make the last
        // block emit zeros, and sigmoid(0) = 0.5.
        m.layers[DEC_BN[2]].weight.fill(0.0);
        m.layers[DEC_BN[2]].bias.fill(0.0);
        let pixels = (3 * 16 * 16) as f64;
        for seed in 0..3 {
            let x = images(2, seed).cast::<f64>();
            let t = images(2, seed + 10).cast::<f64>();
            let eps = Tensor::full(&[1, 2, 300], 0.3);
            let loss = m.loss(&x, &t.map(|_| 0.5), &eps, false).unwrap();
            assert!((loss.total - pixels * std::f64::consts::LN_2).abs() < 1e-9, "{}", loss.total);
        }
    }

    #[test]
    fn reparameterization_cases() {
        let mean = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let mut latent = GaussianLatent::new(mean, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(latent.reparameterize(&Tensor::zeros(&[1, 2])).unwrap().data(), &[1.0, 2.0]);
        let mut unit = GaussianLatent::<f64>::new(Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(unit.reparameterize(&Tensor::ones(&[1, 1])).unwrap().data(), &[1.0]);
        assert!(unit.reparameterize(&Tensor::ones(&[1, 2])).is_err());
    }

    #[test]
    fn target_swap_is_the_only_difference_in_self_mode() {
        let mut vpe = toy();
        let mut cfg = VpeConfig::toy();
        cfg.target_mode = TargetMode::SelfReconstruction;
        let mut vae = Vpe::<f32>::from_layers(cfg, vpe.layers.clone()).unwrap();
        let x = images(3, 4);
        let t = images(3, 5);
        let eps = Tensor::full(&[1, 3, 300], 0.1);
        // The network itself ignores the mode; the trainer picks the target.
        let a = vpe.loss(&x, &x, &eps, true).unwrap();
        let b = vae.loss(&x, &x, &eps, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(vpe.layers, vae.layers);
        let c = vpe.loss(&x, &t, &eps, false).unwrap();
        assert_ne!(a.recon, c.recon);
    }

    #[test]
    fn end_to_end_gradient_check() {
        let mut probe = LossProbe::new(VpeConfig::toy(), 2, 11).unwrap();
        let report = gradient_check(&mut probe, GradCheckOptions::default());
        let worst = report.worst().unwrap();
        assert!(report.max_rel_error() < 1e-4, "{worst:?}");
        assert_eq!(report.entries.len(), 31);
    }

    #[test]
    fn end_to_end_gradient_check_with_two_samples() {
        let cfg = VpeConfig {
            mc_samples: 2,
            latent_dim: 12,
            encoder: [ConvStage { channels: 4, kernel: 3 }; 3],
            ..VpeConfig::toy()
        };
        let mut probe = LossProbe::new(cfg, 2, 3).unwrap();
        let report = gradient_check(&mut probe, GradCheckOptions::default());
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }
}
