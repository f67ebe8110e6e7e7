use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel-major `C x H x W` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Resample {
    #[default]
    Bilinear,
    Nearest,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, color: &[f32]) -> Self {
        let mut img = Self::zeros(channels, height, width);
        for c in 0..channels {
            img.plane_mut(c).fill(color[c % color.len()]);
        }
        img
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
    }

    /// Fraction of pixels where any channel differs by more than `tol`.
    pub fn fraction_differing(&self, other: &ImageTensor, tol: f32) -> f64 {
        assert_eq!(
            (self.channels, self.height, self.width),
            (other.channels, other.height, other.width)
        );
        let n = self.height * self.width;
        let differing = (0..n)
            .filter(|&i| (0..self.channels).any(|c| (self.data[c * n + i] - other.data[c * n + i]).abs() > tol))
            .count();
        differing as f64 / n as f64
    }

    pub fn l2_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f64::from(a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Converts between 1 and 3 channels (luma average or replication).
    pub fn with_channels(&self, channels: usize) -> ImageTensor {
        if channels == self.channels {
            return self.clone();
        }
        let n = self.height * self.width;
        let mut out = ImageTensor::zeros(channels, self.height, self.width);
        for i in 0..n {
            let mean = (0..self.channels).map(|c| self.data[c * n + i]).sum::<f32>() / self.channels as f32;
            for c in 0..channels {
                out.data[c * n + i] = if self.channels == 1 || channels != 3 {
                    mean
                } else {
                    self.data[(c % self.channels) * n + i]
                };
            }
        }
        out
    }

    /// `[1, C, H, W]` tensor view of this image.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone()).expect("shape")
    }

    /// Image `index` of an `[N, C, H, W]` batch.
    pub fn from_batch(batch: &Tensor<f32>, index: usize) -> Result<ImageTensor> {
        match *batch.shape() {
            [n, c, h, w] if index < n => {
                ImageTensor::from_vec(c, h, w, batch.data()[index * c * h * w..(index + 1) * c * h * w].to_vec())
            }
            _ => Err(Error::shape("from_batch", format!("{:?} index {index}", batch.shape()))),
        }
    }

    pub fn stack<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in images {
            let d = (img.channels, img.height, img.width);
            if *dims.get_or_insert(d) != d {
                return Err(Error::shape("stack", "images differ in size"));
            }
            data.extend_from_slice(&img.data);
            n += 1;
        }
        let (c, h, w) = dims.ok_or_else(|| Error::InvalidArgument("stack of zero images".into()))?;
        Tensor::from_vec(&[n, c, h, w], data)
    }

    /// Area-averaging resize; exact when the size is unchanged.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        let mut out = ImageTensor::zeros(self.channels, height, width);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let spans = |count: usize, scale: f64, limit: usize| -> Vec<Vec<(usize, f64)>> {
            (0..count)
                .map(|o| {
                    let lo = o as f64 * scale;
                    let hi = (o + 1) as f64 * scale;
                    let mut v = Vec::new();
                    let mut i = lo.floor() as usize;
                    while (i as f64) < hi && i < limit {
                        let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        if w > 0.0 {
                            v.push((i, w));
                        }
                        i += 1;
                    }
                    v
                })
                .collect()
        };
        let ys = spans(height, sy, self.height);
        let xs = spans(width, sx, self.width);
        for c in 0..self.channels {
            for (oy, yspan) in ys.iter().enumerate() {
                for (ox, xspan) in xs.iter().enumerate() {
                    let mut acc = 0.0f64;
                    let mut total = 0.0f64;
                    for &(y, wy) in yspan {
                        for &(x, wx) in xspan {
                            acc += f64::from(self.get(c, y, x)) * wy * wx;
                            total += wy * wx;
                        }
                    }
                    out.set(c, oy, ox, (acc / total) as f32);
                }
            }
        }
        out
    }

    /// Aspect-preserving resize of the longer side to `target`, centered on a
    /// zero canvas of `target x target`.
    pub fn letterbox(&self, target: usize) -> Result<ImageTensor> {
        if target == 0 {
            return Err(Error::InvalidArgument("letterbox target must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("cannot letterbox an empty image".into()));
        }
        let longer = self.height.max(self.width) as f64;
        let scale = target as f64 / longer;
        let h = ((self.height as f64 * scale).round() as usize).clamp(1, target);
        let w = ((self.width as f64 * scale).round() as usize).clamp(1, target);
        let content = self.resize(h, w);
        let mut out = ImageTensor::zeros(self.channels, target, target);
        let (oy, ox) = ((target - h) / 2, (target - w) / 2);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, oy + y, ox + x, content.get(c, y, x));
                }
            }
        }
        Ok(out)
    }

    /// Sample at fractional coordinates, zero outside the image.
    pub fn sample(&self, c: usize, y: f64, x: f64, mode: Resample) -> f32 {
        match mode {
            Resample::Nearest => {
                let (yi, xi) = (y.round(), x.round());
                if yi < 0.0 || xi < 0.0 || yi >= self.height as f64 || xi >= self.width as f64 {
                    0.0
                } else {
                    self.get(c, yi as usize, xi as usize)
                }
            }
            Resample::Bilinear => {
                let (y0, x0) = (y.floor(), x.floor());
                let (fy, fx) = (y - y0, x - x0);
                let at = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                        0.0
                    } else {
                        f64::from(self.get(c, yy as usize, xx as usize))
                    }
                };
                let mut v = 0.0;
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let w = wy * wx;
                        if w != 0.0 {
                            v += w * at(y0 + dy, x0 + dx);
                        }
                    }
                }
                v as f32
            }
        }
    }

    /// Counter-clockwise rotation about the image center, zero fill.
    pub fn rotate(&self, degrees: f64, mode: Resample) -> ImageTensor {
        let (s, c) = degrees.to_radians().sin_cos();
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let mut out = ImageTensor::zeros(self.channels, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                // Inverse rotation; image y points down.
                let sx = c * dx - s * dy + cx;
                let sy = s * dx + c * dy + cy;
                for ch in 0..self.channels {
                    out.set(ch, y, x, self.sample(ch, sy, sx, mode));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Reads an 8-bit PNG, normalizing by 255.
    pub fn load_png(path: &Path, channels: usize) -> Result<ImageTensor> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut out = ImageTensor::zeros(3, h, w);
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, f32::from(p[c]) / 255.0);
            }
        }
        Ok(out.with_channels(channels))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let rgb = self.with_channels(3);
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (rgb.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Horizontal concatenation with an optional gap of `gap` zero pixels.
    pub fn hconcat(images: &[ImageTensor], gap: usize) -> Result<ImageTensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image row".into()))?;
        let h = first.height;
        let c = first.channels;
        let w: usize = images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
        let mut out = ImageTensor::zeros(c, h, w);
        let mut x0 = 0;
        for img in images {
            if img.height != h || img.channels != c {
                return Err(Error::shape("hconcat", "images differ in height or channels"));
            }
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..img.width {
                        out.set(ch, y, x0 + x, img.get(ch, y, x));
                    }
                }
            }
            x0 += img.width + gap;
        }
        Ok(out)
    }

    pub fn vconcat(images: &[ImageTensor], gap: usize) -> Result<ImageTensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image column".into()))?;
        let (c, w) = (first.channels, first.width);
        let h: usize = images.iter().map(|i| i.height).sum::<usize>() + gap * (images.len() - 1);
        let mut out = ImageTensor::zeros(c, h, w);
        let mut y0 = 0;
        for img in images {
            if img.width != w || img.channels != c {
                return Err(Error::shape("vconcat", "images differ in width or channels"));
            }
            for ch in 0..c {
                for y in 0..img.height {
                    for x in 0..w {
                        out.set(ch, y0 + y, x, img.get(ch, y, x));
                    }
                }
            }
            y0 += img.height + gap;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> ImageTensor {
        let n = c * h * w;
        ImageTensor::from_vec(c, h, w, (0..n).map(|i| (i % 251) as f32 / 250.0).collect()).unwrap()
    }

    #[test]
    fn letterbox_wide_image() {
        let img = ImageTensor::filled(3, 50, 100, &[0.8]);
        let out = img.letterbox(64).unwrap();
        assert_eq!((out.height(), out.width()), (64, 64));
        for x in 0..64 {
            for y in 0..64 {
                let inside = (16..48).contains(&y);
                let v = out.get(0, y, x);
                if inside {
                    assert!((v - 0.8).abs() < 1e-6);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn letterbox_square_has_no_band() {
        let img = ImageTensor::filled(1, 40, 40, &[0.5]);
        let out = img.letterbox(16).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let same = ramp(3, 16, 16);
        assert_eq!(same.letterbox(16).unwrap(), same);
    }

    #[test]
    fn letterbox_rejects_empty() {
        assert!(ImageTensor::zeros(3, 0, 5).letterbox(8).is_err());
        assert!(ramp(1, 4, 4).letterbox(0).is_err());
    }

    #[test]
    fn flip_is_involution() {
        let img = ramp(3, 7, 9);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn rotate_zero_is_identity_and_half_turn_twice_returns() {
        let img = ramp(3, 12, 12);
        assert_eq!(img.rotate(0.0, Resample::Bilinear), img);
        let back = img.rotate(180.0, Resample::Nearest).rotate(180.0, Resample::Nearest);
        assert_eq!(back, img);
    }

    #[test]
    fn png_round_trip_quantizes_to_255ths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ramp(3, 5, 6);
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path, 3).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            assert!((b * 255.0 - (b * 255.0).round()).abs() < 1e-4);
        }
    }
}
