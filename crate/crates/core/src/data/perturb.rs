//! Synthetic "real-world" images: geometric warp, background composite,
//! occlusion, photometric change, blur and sensor noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::{ImageTensor, Resample};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    /// All zeros; the sign is left on black.
    Blank,
    Noise,
    Gradient,
    Stripes,
    Checker,
    Blobs,
}

impl Background {
    pub const TEXTURED: [Background; 5] = [
        Background::Noise,
        Background::Gradient,
        Background::Stripes,
        Background::Checker,
        Background::Blobs,
    ];
}

/// One concrete perturbation. [`PerturbationParams::identity`] leaves an
/// image untouched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationParams {
    /// Counter-clockwise, degrees, within `[-180, 180]`.
    pub rotation: f64,
    /// Horizontal shear factor, `[-0.5, 0.5]`.
    pub shear: f64,
    /// Sign size relative to the canvas, `[0.3, 1.5]`.
    pub scale: f64,
    /// Width stretch of the whole image, `[0.5, 2]`. The output width is
    /// `round(width * aspect)`.
    pub aspect: f64,
    /// Projective tilt along x and y, each within `[-0.3, 0.3]`.
    pub perspective: [f64; 2],
    /// Sign displacement as a fraction of the half-extent, `[-0.3, 0.3]`.
    pub offset: [f64; 2],
    /// Additive brightness, `[-0.5, 0.5]`.
    pub brightness: f64,
    /// Contrast about mid-gray, `[0.2, 2]`.
    pub contrast: f64,
    /// Per-channel additive shift, each within `[-0.3, 0.3]`.
    pub color_shift: [f64; 3],
    /// Gaussian blur standard deviation in pixels, `[0, 4]`.
    pub blur: f64,
    /// Additive Gaussian noise deviation, `[0, 0.3]`.
    pub noise: f64,
    pub background: Background,
    /// Fraction of the canvas hidden by a solid rectangle, `[0, 0.5]`.
    pub occlusion: f64,
}

impl PerturbationParams {
    pub fn identity() -> Self {
        PerturbationParams {
            rotation: 0.0,
            shear: 0.0,
            scale: 1.0,
            aspect: 1.0,
            perspective: [0.0; 2],
            offset: [0.0; 2],
            brightness: 0.0,
            contrast: 1.0,
            color_shift: [0.0; 3],
            blur: 0.0,
            noise: 0.0,
            background: Background::Blank,
            occlusion: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        check("rotation", self.rotation, -180.0, 180.0)?;
        check("shear", self.shear, -0.5, 0.5)?;
        check("scale", self.scale, 0.3, 1.5)?;
        check("aspect", self.aspect, 0.5, 2.0)?;
        for &p in &self.perspective {
            check("perspective", p, -0.3, 0.3)?;
        }
        for &o in &self.offset {
            check("offset", o, -0.3, 0.3)?;
        }
        check("brightness", self.brightness, -0.5, 0.5)?;
        check("contrast", self.contrast, 0.2, 2.0)?;
        for &c in &self.color_shift {
            check("color_shift", c, -0.3, 0.3)?;
        }
        check("blur", self.blur, 0.0, 4.0)?;
        check("noise", self.noise, 0.0, 0.3)?;
        check("occlusion", self.occlusion, 0.0, 0.5)
    }

    fn is_geometric_identity(&self) -> bool {
        self.rotation == 0.0
            && self.shear == 0.0
            && self.scale == 1.0
            && self.aspect == 1.0
            && self.perspective == [0.0; 2]
            && self.offset == [0.0; 2]
    }

    fn is_photometric_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 1.0 && self.color_shift == [0.0; 3]
    }
}

/// Sampling ranges for [`PerturbationParams`]. Symmetric fields draw from
/// `[-max, max]`; ranged fields from `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationRanges {
    pub rotation: f64,
    pub shear: f64,
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
    pub perspective: f64,
    pub offset: f64,
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub color_shift: f64,
    pub blur: (f64, f64),
    pub noise: (f64, f64),
    pub occlusion: (f64, f64),
    pub occlusion_probability: f64,
    /// Probability of compositing onto a textured background rather than black.
    pub background_probability: f64,
}

impl Default for PerturbationRanges {
    fn default() -> Self {
        PerturbationRanges {
            rotation: 15.0,
            shear: 0.15,
            scale: (0.65, 1.0),
            aspect: (0.8, 1.25),
            perspective: 0.12,
            offset: 0.1,
            brightness: 0.25,
            contrast: (0.6, 1.3),
            color_shift: 0.12,
            blur: (0.0, 1.5),
            noise: (0.0, 0.06),
            occlusion: (0.0, 0.2),
            occlusion_probability: 0.3,
            background_probability: 0.9,
        }
    }
}

impl PerturbationRanges {
    /// Applies one `perturb.<field>` setting; ranged fields take `lo,hi`.
    /// Returns `Ok(false)` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("perturb.") else {
            return Ok(false);
        };
        let bad = || Error::InvalidArgument(format!("bad value `{value}` for `{key}`"));
        let one = || value.trim().parse::<f64>().map_err(|_| bad());
        let pair = || -> Result<(f64, f64)> {
            let (a, b) = value.split_once(',').ok_or_else(bad)?;
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            Ok((a, b))
        };
        match field {
            "rotation" => self.rotation = one()?,
            "shear" => self.shear = one()?,
            "scale" => self.scale = pair()?,
            "aspect" => self.aspect = pair()?,
            "perspective" => self.perspective = one()?,
            "offset" => self.offset = one()?,
            "brightness" => self.brightness = one()?,
            "contrast" => self.contrast = pair()?,
            "color_shift" => self.color_shift = one()?,
            "blur" => self.blur = pair()?,
            "noise" => self.noise = pair()?,
            "occlusion" => self.occlusion = pair()?,
            "occlusion_probability" => self.occlusion_probability = one()?,
            "background_probability" => self.background_probability = one()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_lines(&self) -> Vec<(String, String)> {
        let pair = |(a, b): (f64, f64)| format!("{a:?},{b:?}");
        [
            ("rotation", format!("{:?}", self.rotation)),
            ("shear", format!("{:?}", self.shear)),
            ("scale", pair(self.scale)),
            ("aspect", pair(self.aspect)),
            ("perspective", format!("{:?}", self.perspective)),
            ("offset", format!("{:?}", self.offset)),
            ("brightness", format!("{:?}", self.brightness)),
            ("contrast", pair(self.contrast)),
            ("color_shift", format!("{:?}", self.color_shift)),
            ("blur", pair(self.blur)),
            ("noise", pair(self.noise)),
            ("occlusion", pair(self.occlusion)),
            ("occlusion_probability", format!("{:?}", self.occlusion_probability)),
            ("background_probability", format!("{:?}", self.background_probability)),
        ]
        .into_iter()
        .map(|(k, v)| (format!("perturb.{k}"), v))
        .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> PerturbationParams {
        fn sym(rng: &mut Rng, max: f64) -> f64 {
            if max > 0.0 {
                rng.random_range(-max..=max)
            } else {
                0.0
            }
        }
        fn range(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        }
        let rotation = sym(rng, self.rotation);
        let shear = sym(rng, self.shear);
        let scale = range(rng, self.scale);
        // Log-uniform so stretching and squeezing are equally likely.
        let aspect = range(rng, (self.aspect.0.ln(), self.aspect.1.ln())).exp();
        let perspective = [sym(rng, self.perspective), sym(rng, self.perspective)];
        let offset = [sym(rng, self.offset), sym(rng, self.offset)];
        let brightness = sym(rng, self.brightness);
        let contrast = range(rng, self.contrast);
        let color_shift = [
            sym(rng, self.color_shift),
            sym(rng, self.color_shift),
            sym(rng, self.color_shift),
        ];
        let blur = range(rng, self.blur);
        let noise = range(rng, self.noise);
        let background = if rng.random_bool(self.background_probability.clamp(0.0, 1.0)) {
            Background::TEXTURED[rng.random_range(0..Background::TEXTURED.len())]
        } else {
            Background::Blank
        };
        let occlusion = if rng.random_bool(self.occlusion_probability.clamp(0.0, 1.0)) {
            range(rng, self.occlusion)
        } else {
            0.0
        };
        PerturbationParams {
            rotation,
            shear,
            scale,
            aspect,
            perspective,
            offset,
            brightness,
            contrast,
            color_shift,
            blur,
            noise,
            background,
            occlusion,
        }
    }
}

/// Renders `prototype` as a perturbed photograph. `seed` drives the
/// background texture, occluder placement and noise; `params` everything else.
pub fn perturb(prototype: &ImageTensor, params: &PerturbationParams, seed: u64) -> Result<ImageTensor> {
    params.validate()?;
    let mut rng = rng::stream(seed, rng::PERTURBATION);
    let (c, h) = (prototype.channels(), prototype.height());
    let w = ((prototype.width() as f64 * params.aspect).round() as usize).max(1);

    let (color, mask) = if params.is_geometric_identity() {
        (prototype.clone(), None)
    } else {
        let (color, mask) = warp(prototype, params, w);
        (color, Some(mask))
    };
    let mut out = if params.background == Background::Blank {
        color
    } else {
        let bg = background(params.background, c, h, w, &mut rng);
        let sign_mask = mask.unwrap_or_else(|| coverage(prototype));
        let mut out = bg;
        let n = h * w;
        for ch in 0..c {
            let src = color.plane(ch);
            let dst = out.plane_mut(ch);
            for i in 0..n {
                // `color` is premultiplied by coverage (zero background).
                dst[i] = src[i] + (1.0 - sign_mask[i]) * dst[i];
            }
        }
        out
    };
    if params.occlusion > 0.0 {
        occlude(&mut out, params.occlusion, &mut rng);
    }
    if !params.is_photometric_identity() {
        photometric(&mut out, params);
    }
    if params.blur > 0.0 {
        out = gaussian_blur(&out, params.blur);
    }
    if params.noise > 0.0 {
        let normal = Normal::new(0.0, params.noise).expect("noise deviation validated");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    out.clamp01();
    Ok(out)
}

/// Per-pixel sign coverage: 1 where any channel is positive.
fn coverage(img: &ImageTensor) -> Vec<f32> {
    let n = img.height() * img.width();
    (0..n)
        .map(|i| {
            if (0..img.channels()).any(|c| img.plane(c)[i] > 0.0) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Warps color and coverage with the same inverse map. Coordinates are
/// normalized by the half-height so the aspect stretch is anisotropic.
fn warp(src: &ImageTensor, p: &PerturbationParams, out_width: usize) -> (ImageTensor, Vec<f32>) {
    let (c, h) = (src.channels(), src.height());
    let mask = ImageTensor::from_vec(1, h, src.width(), coverage(src)).expect("mask shape");
    let half_src = h as f64 / 2.0;
    let (scy, scx) = ((h as f64 - 1.0) / 2.0, (src.width() as f64 - 1.0) / 2.0);
    let (dcy, dcx) = ((h as f64 - 1.0) / 2.0, (out_width as f64 - 1.0) / 2.0);

    // Forward linear part A = Rot * Shear * diag(scale * aspect, scale), with y down.
    let (s, co) = p.rotation.to_radians().sin_cos();
    let (sx, sy) = (p.scale * p.aspect, p.scale);
    let a = [[co * sx, co * p.shear * sy + s * sy], [-s * sx, -s * p.shear * sy + co * sy]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];

    let mut color = ImageTensor::zeros(c, h, out_width);
    let mut cover = vec![0.0f32; h * out_width];
    for y in 0..h {
        for x in 0..out_width {
            let qx = (x as f64 - dcx) / half_src;
            let qy = (y as f64 - dcy) / half_src;
            // Undo the projective tilt q' = q / (1 + k.q).
            let denom = 1.0 - (p.perspective[0] * qx + p.perspective[1] * qy);
            if denom <= 1e-6 {
                continue;
            }
            let (qx, qy) = (qx / denom - p.offset[0], qy / denom - p.offset[1]);
            let ux = inv[0][0] * qx + inv[0][1] * qy;
            let uy = inv[1][0] * qx + inv[1][1] * qy;
            let (fx, fy) = (scx + ux * half_src, scy + uy * half_src);
            let m = mask.sample(0, fy, fx, Resample::Bilinear);
            if m <= 0.0 {
                continue;
            }
            cover[y * out_width + x] = m;
            for ch in 0..c {
                color.set(ch, y, x, src.sample(ch, fy, fx, Resample::Bilinear));
            }
        }
    }
    (color, cover)
}

fn background(kind: Background, c: usize, h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
    let base: Vec<f32> = (0..c).map(|_| rng.random_range(0.15..0.85)).collect();
    let alt: Vec<f32> = (0..c).map(|_| rng.random_range(0.05..0.95)).collect();
    let mut img = ImageTensor::zeros(c, h, w);
    match kind {
        Background::Blank => {}
        Background::Noise => {
            let amp = rng.random_range(0.05..0.25f32);
            for ch in 0..c {
                for v in img.plane_mut(ch) {
                    *v = base[ch] + amp * (rng.random::<f32>() - 0.5) * 2.0;
                }
            }
        }
        Background::Gradient => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, co) = angle.sin_cos();
            let span = (h + w) as f64 / 2.0;
            for y in 0..h {
                for x in 0..w {
                    let t = (((x as f64 - w as f64 / 2.0) * co + (y as f64 - h as f64 / 2.0) * s) / span + 0.5)
                        .clamp(0.0, 1.0) as f32;
                    for ch in 0..c {
                        img.set(ch, y, x, base[ch] * (1.0 - t) + alt[ch] * t);
                    }
                }
            }
        }
        Background::Stripes => {
            let period = rng.random_range(3.0..(h.max(8) as f64 / 2.0));
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (s, co) = angle.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 * co + y as f64 * s) / period).floor() as i64;
                    let color = if t.rem_euclid(2) == 0 { &base } else { &alt };
                    for ch in 0..c {
                        img.set(ch, y, x, color[ch]);
                    }
                }
            }
        }
        Background::Checker => {
            let cell = rng.random_range(2..=(h / 4).max(3));
            for y in 0..h {
                for x in 0..w {
                    let color = if (x / cell + y / cell) % 2 == 0 { &base } else { &alt };
                    for ch in 0..c {
                        img.set(ch, y, x, color[ch]);
                    }
                }
            }
        }
        Background::Blobs => {
            for ch in 0..c {
                img.plane_mut(ch).fill(base[ch]);
            }
            for _ in 0..rng.random_range(3..8) {
                let (by, bx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
                let r = rng.random_range(0.08..0.3) * h as f64;
                let color: Vec<f32> = (0..c).map(|_| rng.random_range(0.05..0.95)).collect();
                for y in 0..h {
                    for x in 0..w {
                        if (y as f64 - by).powi(2) + (x as f64 - bx).powi(2) <= r * r {
                            for ch in 0..c {
                                img.set(ch, y, x, color[ch]);
                            }
                        }
                    }
                }
            }
        }
    }
    img.clamp01();
    img
}

fn occlude(img: &mut ImageTensor, fraction: f64, rng: &mut Rng) {
    let (h, w) = (img.height(), img.width());
    let area = fraction * (h * w) as f64;
    let ratio = rng.random_range(0.5..2.0f64);
    let oh = ((area * ratio).sqrt().round() as usize).clamp(1, h);
    let ow = ((area / oh as f64).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - oh);
    let x0 = rng.random_range(0..=w - ow);
    let color: Vec<f32> = (0..img.channels()).map(|_| rng.random_range(0.0..1.0)).collect();
    for (ch, &v) in color.iter().enumerate() {
        for y in y0..y0 + oh {
            for x in x0..x0 + ow {
                img.set(ch, y, x, v);
            }
        }
    }
}

fn photometric(img: &mut ImageTensor, p: &PerturbationParams) {
    let contrast = p.contrast as f32;
    let brightness = p.brightness as f32;
    for ch in 0..img.channels() {
        let shift = brightness + p.color_shift[ch % 3] as f32;
        for v in img.plane_mut(ch) {
            *v = (*v - 0.5) * contrast + 0.5 + shift;
        }
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for ch in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wk)| {
                        let xx = (x + k as isize - radius).clamp(0, w - 1);
                        wk * f64::from(img.get(ch, y as usize, xx as usize))
                    })
                    .sum();
                tmp.set(ch, y as usize, x as usize, v as f32);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wk)| {
                        let yy = (y + k as isize - radius).clamp(0, h - 1);
                        wk * f64::from(tmp.get(ch, yy as usize, x as usize))
                    })
                    .sum();
                out.set(ch, y as usize, x as usize, v as f32);
            }
        }
    }
    out
}
