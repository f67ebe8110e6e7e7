//! Procedural traffic-sign-like prototypes: a border shape, a fill style and
//! an interior glyph, rasterized analytically at pixel centers.

use rand::seq::SliceRandom;

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::rng;

/// Minimum fraction of pixels on which any two prototypes must differ.
pub const MIN_PAIRWISE_DIFFERENCE: f64 = 0.05;
/// Per-channel tolerance used when counting differing pixels.
pub const PIXEL_TOLERANCE: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BorderShape {
    Circle,
    Triangle,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FillStyle {
    Red,
    Blue,
    WhiteRedRing,
    YellowDarkRing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Glyph {
    /// Arrow pointing `45 * n` degrees counter-clockwise from the right.
    Arrow(u8),
    Bar,
    Dots(u8),
    Strokes(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SymbolSpec {
    pub shape: BorderShape,
    pub style: FillStyle,
    pub glyph: Glyph,
}

const SHAPES: [BorderShape; 3] = [BorderShape::Circle, BorderShape::Triangle, BorderShape::Square];
const STYLES: [FillStyle; 4] = [
    FillStyle::Red,
    FillStyle::Blue,
    FillStyle::WhiteRedRing,
    FillStyle::YellowDarkRing,
];

const RED: [f32; 3] = [0.85, 0.1, 0.1];
const BLUE: [f32; 3] = [0.1, 0.25, 0.8];
const WHITE: [f32; 3] = [0.95, 0.95, 0.95];
const YELLOW: [f32; 3] = [0.95, 0.8, 0.1];
const DARK: [f32; 3] = [0.1, 0.1, 0.1];

/// Seven-segment masks (a b c d e f g) for the stroke glyphs: 2, 3, 4, 5, 7.
const DIGITS: [[bool; 7]; 5] = [
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, true, true, false, false, false, false],
];

impl Glyph {
    pub fn all() -> Vec<Glyph> {
        let mut v: Vec<Glyph> = (0..8).map(Glyph::Arrow).collect();
        v.push(Glyph::Bar);
        v.extend((0..4).map(Glyph::Dots));
        v.extend((0..DIGITS.len() as u8).map(Glyph::Strokes));
        v
    }
}

impl SymbolSpec {
    /// Every distinct combination, in a fixed order.
    pub fn catalog() -> Vec<SymbolSpec> {
        let glyphs = Glyph::all();
        let mut out = Vec::new();
        for &shape in &SHAPES {
            for &style in &STYLES {
                for &glyph in &glyphs {
                    out.push(SymbolSpec { shape, style, glyph });
                }
            }
        }
        out
    }

    pub fn name(&self) -> String {
        let shape = match self.shape {
            BorderShape::Circle => "circle",
            BorderShape::Triangle => "triangle",
            BorderShape::Square => "square",
        };
        let style = match self.style {
            FillStyle::Red => "red",
            FillStyle::Blue => "blue",
            FillStyle::WhiteRedRing => "whitered",
            FillStyle::YellowDarkRing => "yellow",
        };
        let glyph = match self.glyph {
            Glyph::Arrow(o) => format!("arrow{}", u32::from(o) * 45),
            Glyph::Bar => "bar".into(),
            Glyph::Dots(p) => format!("dots{p}"),
            Glyph::Strokes(k) => format!("digit{k}"),
        };
        format!("{shape}_{style}_{glyph}")
    }

    fn colors(&self) -> ([f32; 3], [f32; 3], [f32; 3]) {
        // (ring, interior, glyph)
        match self.style {
            FillStyle::Red => (RED, RED, WHITE),
            FillStyle::Blue => (BLUE, BLUE, WHITE),
            FillStyle::WhiteRedRing => (RED, WHITE, DARK),
            FillStyle::YellowDarkRing => (DARK, YELLOW, DARK),
        }
    }

    /// Signed distance-like value: negative inside the border shape.
    fn shape_distance(&self, u: f64, v: f64) -> f64 {
        match self.shape {
            BorderShape::Circle => (u * u + v * v).sqrt() - 0.92,
            BorderShape::Square => u.abs().max(v.abs()) - 0.85,
            BorderShape::Triangle => {
                // Apex up; edges as outward half-planes.
                let edges = [
                    (0.0, 1.0, -0.78),
                    (0.8682, -0.4962, -0.4466),
                    (-0.8682, -0.4962, -0.4466),
                ];
                edges
                    .iter()
                    .map(|&(a, b, c)| a * u + b * v + c)
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    fn glyph_hit(&self, u: f64, v: f64) -> bool {
        let (u, v) = match self.shape {
            BorderShape::Triangle => (u / 0.62, (v - 0.18) / 0.62),
            _ => (u, v),
        };
        match self.glyph {
            Glyph::Arrow(o) => {
                let theta = f64::from(o) * std::f64::consts::FRAC_PI_4;
                let (s, c) = theta.sin_cos();
                // Counter-clockwise on screen means y flipped.
                let lu = c * u - s * v;
                let lv = s * u + c * v;
                let shaft = (-0.48..=0.08).contains(&lu) && lv.abs() <= 0.11;
                let head = (0.08..=0.52).contains(&lu) && lv.abs() <= 0.34 * (0.52 - lu) / 0.44;
                shaft || head
            }
            Glyph::Bar => u.abs() <= 0.5 && v.abs() <= 0.13,
            Glyph::Dots(p) => {
                let centers: &[(f64, f64)] = match p {
                    0 => &[(0.0, 0.0)],
                    1 => &[(-0.3, 0.0), (0.3, 0.0)],
                    2 => &[(0.0, -0.28), (-0.28, 0.22), (0.28, 0.22)],
                    _ => &[(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)],
                };
                let r = if p == 0 { 0.26 } else { 0.16 };
                centers.iter().any(|&(cu, cv)| (u - cu).powi(2) + (v - cv).powi(2) <= r * r)
            }
            Glyph::Strokes(k) => {
                let seg = DIGITS[usize::from(k) % DIGITS.len()];
                let (hw, hh, t) = (0.26, 0.42, 0.1);
                let horiz = |cy: f64| u.abs() <= hw && (v - cy).abs() <= t;
                let vert = |cx: f64, top: bool| {
                    (u - cx).abs() <= t && if top { (-hh..=0.0).contains(&v) } else { (0.0..=hh).contains(&v) }
                };
                (seg[0] && horiz(-hh))
                    || (seg[1] && vert(hw, true))
                    || (seg[2] && vert(hw, false))
                    || (seg[3] && horiz(hh))
                    || (seg[4] && vert(-hw, false))
                    || (seg[5] && vert(-hw, true))
                    || (seg[6] && horiz(0.0))
            }
        }
    }

    /// RGB rendering on a zero background. Every pixel of the sign has at
    /// least one strictly positive channel, so `max channel > 0` is its mask.
    pub fn render(&self, size: usize) -> ImageTensor {
        let (ring, interior, glyph) = self.colors();
        let ring_width = match self.shape {
            BorderShape::Triangle => 0.2,
            _ => 0.17,
        };
        let mut img = ImageTensor::zeros(3, size, size);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                let d = self.shape_distance(u, v);
                if d > 0.0 {
                    continue;
                }
                let color = if d > -ring_width {
                    ring
                } else if self.glyph_hit(u, v) {
                    glyph
                } else {
                    interior
                };
                for (c, &value) in color.iter().enumerate() {
                    img.set(c, y, x, value);
                }
            }
        }
        img
    }
}

/// Picks `n_classes` symbols from a seeded shuffle of the catalog, skipping
/// any that would fall below the pairwise difference threshold, and renders
/// them at `size` pixels.
pub fn render_prototypes(n_classes: usize, size: usize, seed: u64) -> Result<Vec<(SymbolSpec, ImageTensor)>> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    let mut catalog = SymbolSpec::catalog();
    if n_classes > catalog.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_classes} classes requested but only {} distinct symbols exist",
            catalog.len()
        )));
    }
    catalog.shuffle(&mut rng::stream(seed, "prototypes"));
    let mut chosen: Vec<(SymbolSpec, ImageTensor)> = Vec::with_capacity(n_classes);
    for spec in catalog {
        let img = spec.render(size);
        if chosen
            .iter()
            .all(|(_, other)| img.fraction_differing(other, PIXEL_TOLERANCE) >= MIN_PAIRWISE_DIFFERENCE)
        {
            chosen.push((spec, img));
            if chosen.len() == n_classes {
                return Ok(chosen);
            }
        }
    }
    Err(Error::InvalidArgument(format!(
        "only {} mutually distinct symbols available at {size}px, {n_classes} requested",
        chosen.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Resample;

    #[test]
    fn deterministic_given_seed() {
        let a = render_prototypes(6, 32, 9).unwrap();
        let b = render_prototypes(6, 32, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn thirty_classes_pairwise_distinct() {
        let protos = render_prototypes(30, 64, 1).unwrap();
        assert_eq!(protos.len(), 30);
        for i in 0..protos.len() {
            assert!(protos[i].1.in_unit_range());
            for j in i + 1..protos.len() {
                let d = protos[i].1.fraction_differing(&protos[j].1, PIXEL_TOLERANCE);
                assert!(d >= MIN_PAIRWISE_DIFFERENCE, "{} vs {}: {d}", protos[i].0.name(), protos[j].0.name());
            }
        }
    }

    #[test]
    fn rejects_impossible_counts() {
        assert!(render_prototypes(1, 32, 0).is_err());
        assert!(render_prototypes(10_000, 32, 0).is_err());
    }

    #[test]
    fn half_turn_of_right_arrow_is_left_arrow() {
        let right = SymbolSpec {
            shape: BorderShape::Circle,
            style: FillStyle::Blue,
            glyph: Glyph::Arrow(0),
        };
        let left = SymbolSpec {
            glyph: Glyph::Arrow(4),
            ..right
        };
        let rotated = right.render(64).rotate(180.0, Resample::Nearest);
        let diff = rotated.fraction_differing(&left.render(64), PIXEL_TOLERANCE);
        assert!(diff < 0.01, "{diff}");
    }
}
