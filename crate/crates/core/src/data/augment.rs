//! Paired augmentation: one random rotation and flip shared by the real
//! image and its prototype.

use rand::Rng as _;

use crate::data::{ImageTensor, PairedSample, Resample};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Angles are drawn from `[-spread/2, spread/2)`, or from the whole
    /// circle when the spread is 360 or more. The default of 30 degrees
    /// matches the rotation range of the synthetic perturbations; full
    /// turns would also change the meaning of oriented glyphs such as arrows.
    pub rotation_spread: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_spread: 30.0,
            flip_probability: 0.5,
        }
    }
}

/// A drawn transform: flip first, then rotate counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub fn draw(config: &AugmentConfig, rng: &mut Rng) -> Self {
        let angle = if config.rotation_spread >= 360.0 {
            rng.random_range(0.0..360.0)
        } else if config.rotation_spread > 0.0 {
            let half = config.rotation_spread / 2.0;
            rng.random_range(-half..half)
        } else {
            0.0
        };
        let flip = rng.random_bool(config.flip_probability.clamp(0.0, 1.0));
        AugmentParams { angle, flip }
    }

    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let flipped = if self.flip {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        if self.angle == 0.0 {
            flipped
        } else {
            flipped.rotate(self.angle, Resample::Bilinear)
        }
    }
}

/// Augments both members of `sample` identically; returns the drawn transform.
pub fn augment_pair(sample: &PairedSample, config: &AugmentConfig, seed: u64) -> (PairedSample, AugmentParams) {
    let params = AugmentParams::draw(config, &mut rng::stream(seed, rng::AUGMENTATION));
    let out = PairedSample {
        real: params.apply(&sample.real),
        prototype: params.apply(&sample.prototype),
        ..sample.clone()
    };
    (out, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_prototypes, SampleSource};

    fn sample() -> PairedSample {
        let protos = render_prototypes(2, 16, 4).unwrap();
        PairedSample {
            real: protos[1].1.clone(),
            prototype: protos[0].1.clone(),
            label: 3,
            source: SampleSource::Synthetic,
        }
    }

    #[test]
    fn identical_members_stay_identical() {
        let mut s = sample();
        s.real = s.prototype.clone();
        for seed in 0..20 {
            let (out, _) = augment_pair(&s, &AugmentConfig::default(), seed);
            assert_eq!(out.real, out.prototype);
            assert_eq!(out.label, 3);
        }
    }

    #[test]
    fn recorded_params_reproduce_the_prototype() {
        let s = sample();
        let (out, params) = augment_pair(&s, &AugmentConfig::default(), 17);
        assert_eq!(params.apply(&s.prototype), out.prototype);
        assert_eq!(params.apply(&s.real), out.real);
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = sample();
        let flip = AugmentParams { angle: 0.0, flip: true };
        assert_eq!(flip.apply(&flip.apply(&s.real)), s.real);
    }

    #[test]
    fn angles_stay_within_the_spread() {
        let mut rng = rng::stream(1, "t");
        let cfg = AugmentConfig::default();
        let draws: Vec<AugmentParams> = (0..2000).map(|_| AugmentParams::draw(&cfg, &mut rng)).collect();
        assert!(draws.iter().all(|p| (-15.0..15.0).contains(&p.angle)));
        assert!(draws.iter().any(|p| p.angle > 12.0) && draws.iter().any(|p| p.angle < -12.0));
        let flips = draws.iter().filter(|p| p.flip).count();
        assert!((800..1200).contains(&flips), "{flips}");
    }

    #[test]
    fn full_spread_covers_the_circle() {
        let mut rng = rng::stream(2, "t");
        let cfg = AugmentConfig {
            rotation_spread: 360.0,
            ..AugmentConfig::default()
        };
        let draws: Vec<AugmentParams> = (0..2000).map(|_| AugmentParams::draw(&cfg, &mut rng)).collect();
        assert!(draws.iter().all(|p| (0.0..360.0).contains(&p.angle)));
        assert!(draws.iter().any(|p| p.angle > 300.0) && draws.iter().any(|p| p.angle < 60.0));
    }
}
