//! Browser playground for the synthetic symbol data and the latent-space
//! math: render and perturb prototypes, apply paired augmentation, and
//! compare the closed-form KL term with sampling.

use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use vpe_core::data::{perturb, render_prototypes, AugmentParams, ImageTensor, PerturbationRanges, SymbolSpec};
use vpe_core::model::{kl_divergence, GaussianLatent};
use vpe_core::rng;
use vpe_core::Tensor;

// Errors cross into JS as thrown strings.
fn js(e: vpe_core::Error) -> String {
    e.to_string()
}

/// Row-major RGBA bytes, ready for `ImageData`.
fn rgba(img: &ImageTensor) -> Vec<u8> {
    let rgb = img.with_channels(3);
    let (h, w) = (rgb.height(), rgb.width());
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((rgb.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

#[wasm_bindgen]
pub struct SymbolLab {
    specs: Vec<SymbolSpec>,
    prototypes: Vec<ImageTensor>,
    ranges: PerturbationRanges,
    size: usize,
}

#[wasm_bindgen]
impl SymbolLab {
    #[wasm_bindgen(constructor)]
    pub fn new(classes: usize, size: usize, seed: u32) -> Result<SymbolLab, String> {
        let (specs, prototypes) = render_prototypes(classes, size, u64::from(seed)).map_err(js)?.into_iter().unzip();
        Ok(SymbolLab {
            specs,
            prototypes,
            ranges: PerturbationRanges::default(),
            size,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.specs.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn class_name(&self, class: usize) -> String {
        self.specs.get(class).map(SymbolSpec::name).unwrap_or_default()
    }

    fn proto(&self, class: usize) -> Result<&ImageTensor, String> {
        self.prototypes
            .get(class)
            .ok_or_else(|| format!("no class {class}"))
    }

    pub fn prototype(&self, class: usize) -> Result<Vec<u8>, String> {
        Ok(rgba(self.proto(class)?))
    }

    /// Sets one `perturb.<field>` range; ranged fields take `lo,hi`.
    pub fn set_range(&mut self, key: &str, value: &str) -> Result<(), String> {
        let mut next = self.ranges.clone();
        if !next.set(key, value).map_err(js)? {
            return Err(format!("unknown setting `{key}`"));
        }
        self.ranges = next;
        Ok(())
    }

    /// Current ranges as `key = value` lines.
    pub fn ranges(&self) -> String {
        self.ranges
            .to_lines()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn real(&self, class: usize, seed: u32) -> Result<ImageTensor, String> {
        let proto = self.proto(class)?;
        let mut r = rng::substream(u64::from(seed), rng::PERTURBATION, class as u64);
        let params = self.ranges.sample(&mut r);
        let img = perturb(proto, &params, rng::derive_seed(u64::from(seed), "perturb-image", class as u64)).map_err(js)?;
        img.letterbox(self.size).map_err(js)
    }

    /// A synthetic real image of `class`, letterboxed to the prototype size.
    pub fn perturbed(&self, class: usize, seed: u32) -> Result<Vec<u8>, String> {
        Ok(rgba(&self.real(class, seed)?))
    }

    /// The real image and its prototype side by side after the same rotation
    /// and optional flip. The strip is `2 * size + 2` pixels wide.
    pub fn augmented_pair(&self, class: usize, seed: u32, angle: f64, flip: bool) -> Result<Vec<u8>, String> {
        let t = AugmentParams { angle, flip };
        let real = t.apply(&self.real(class, seed)?);
        let proto = t.apply(self.proto(class)?);
        Ok(rgba(&ImageTensor::hconcat(&[real, proto], 2).map_err(js)?))
    }
}

fn latent(mu: &[f64], logvar: &[f64]) -> Result<GaussianLatent<f64>, String> {
    let d = mu.len();
    let mean = Tensor::from_vec(&[1, d], mu.to_vec()).map_err(js)?;
    let lv = Tensor::from_vec(&[1, logvar.len()], logvar.to_vec()).map_err(js)?;
    GaussianLatent::new(mean, lv).map_err(js)
}

/// Closed-form KL between N(mu, exp(logvar)) and the standard normal.
#[wasm_bindgen]
pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> Result<f64, String> {
    Ok(kl_divergence(&latent(mu, logvar)?)[0])
}

/// Sample mean of `log q(z) - log p(z)` over `draws` reparameterized draws.
#[wasm_bindgen]
pub fn kl_monte_carlo(mu: &[f64], logvar: &[f64], draws: u32, seed: u32) -> Result<f64, String> {
    latent(mu, logvar)?;
    let mut r = rng::stream(u64::from(seed), rng::NOISE);
    let mut total = 0.0;
    for _ in 0..draws {
        for (&m, &lv) in mu.iter().zip(logvar) {
            let eps: f64 = StandardNormal.sample(&mut r);
            let z = m + (0.5 * lv).exp() * eps;
            // The 0.5 * ln(2 pi) terms of both densities cancel.
            total += -0.5 * (lv + eps * eps) + 0.5 * z * z;
        }
    }
    Ok(total / f64::from(draws.max(1)))
}

/// `n` draws of `z = mu + exp(logvar / 2) * eps` for a scalar latent.
#[wasm_bindgen]
pub fn reparameterize(mu: f64, logvar: f64, n: u32, seed: u32) -> Result<Vec<f64>, String> {
    let mut lat = latent(&vec![mu; n as usize], &vec![logvar; n as usize])?;
    let mut r = rng::stream(u64::from(seed), rng::NOISE);
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    let eps = Tensor::from_vec(&[1, n as usize], eps).map_err(js)?;
    Ok(lat.reparameterize(&eps).map_err(js)?.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_images_have_canvas_layout() {
        let lab = SymbolLab::new(4, 24, 1).unwrap();
        assert_eq!(lab.num_classes(), 4);
        assert_eq!(lab.prototype(0).unwrap().len(), 24 * 24 * 4);
        assert_eq!(lab.perturbed(1, 9).unwrap().len(), 24 * 24 * 4);
        assert_eq!(lab.augmented_pair(2, 9, 90.0, true).unwrap().len(), 24 * (2 * 24 + 2) * 4);
        assert_eq!(lab.perturbed(3, 5).unwrap(), lab.perturbed(3, 5).unwrap());
    }

    #[test]
    fn ranges_are_validated() {
        let mut lab = SymbolLab::new(2, 16, 0).unwrap();
        lab.set_range("perturb.rotation", "40").unwrap();
        assert!(lab.ranges().contains("perturb.rotation = 40"));
        assert!(lab.set_range("perturb.nonsense", "1").is_err());
    }

    #[test]
    fn kl_estimates_agree() {
        let (mu, lv) = ([0.5, -1.0, 0.0], [0.2, -0.5, 0.0]);
        let exact = kl_closed_form(&mu, &lv).unwrap();
        let mc = kl_monte_carlo(&mu, &lv, 200_000, 3).unwrap();
        assert!((mc - exact).abs() < 0.02 * exact, "{mc} vs {exact}");
        let z = reparameterize(2.0, 0.0, 50_000, 1).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        assert!((mean - 2.0).abs() < 0.03);
    }
}
