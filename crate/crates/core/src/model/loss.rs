use crate::error::{Error, Result};
use crate::model::GaussianLatent;
use crate::tensor::{Float, Tensor};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the logarithms.
pub const CLAMP: f64 = 1e-7;

/// Summed binary cross entropy `-sum t ln p + (1 - t) ln(1 - p)`.
pub fn bce<T: Float>(pred: &[T], target: &[T]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(CLAMP, 1.0 - CLAMP);
            let t = t.as_f64();
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum()
}

/// Writes `scale * d bce / d p` into `out`. Zero where the clamp is active.
pub(crate) fn bce_grad<T: Float>(pred: &[T], target: &[T], scale: T, out: &mut [T]) {
    let lo = T::of(CLAMP);
    let hi = T::of(1.0 - CLAMP);
    for ((o, &p), &t) in out.iter_mut().zip(pred).zip(target) {
        *o = if p < lo || p > hi {
            T::zero()
        } else {
            scale * (p - t) / (p * (T::one() - p))
        };
    }
}

/// Per-sample reconstruction loss of `[N, ...]` predictions against targets.
pub fn reconstruction_loss<T: Float>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<f64>> {
    if prediction.shape() != target.shape() || prediction.rank() == 0 {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{:?} vs {:?}", prediction.shape(), target.shape()),
        ));
    }
    let n = prediction.shape()[0];
    let per = prediction.len() / n.max(1);
    Ok((0..n)
        .map(|i| bce(&prediction.data()[i * per..][..per], &target.data()[i * per..][..per]))
        .collect())
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))` per sample:
/// `-0.5 * sum(1 + log sigma^2 - mu^2 - sigma^2)`.
pub fn kl_divergence<T: Float>(latent: &GaussianLatent<T>) -> Vec<f64> {
    let l = latent.dim();
    latent
        .mean
        .data()
        .chunks(l)
        .zip(latent.log_variance.data().chunks(l))
        .map(|(mu, lv)| {
            let s: f64 = mu
                .iter()
                .zip(lv)
                .map(|(&m, &v)| {
                    let (m, v) = (m.as_f64(), v.as_f64());
                    1.0 + v - m * m - v.exp()
                })
                .sum();
            -0.5 * s
        })
        .collect()
}

/// `scale * dKL/dmu` and `scale * dKL/dlogvar`.
pub(crate) fn kl_grad<T: Float>(latent: &GaussianLatent<T>, scale: T) -> (Tensor<T>, Tensor<T>) {
    let half = T::of(0.5);
    let gm = latent.mean.map(|m| scale * m);
    let gv = latent.log_variance.map(|v| scale * half * (v.exp() - T::one()));
    (gm, gv)
}
