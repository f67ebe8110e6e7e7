//! Desk-scale synthetic benchmark written in the on-disk dataset format.

use std::path::Path;

use crate::data::dataset::{load_manifest, DatasetManifest, HELD_OUT_PREFIX, PROTOTYPE_FILE, SPLITS_FILE};
use crate::data::{perturb, render_prototypes, PerturbationRanges};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub unseen: usize,
    /// Real images for the largest class.
    pub per_class: usize,
    /// Fraction of each seen class's reals held out as queries.
    pub held_out: f64,
    /// Prototype edge length in pixels; reals share its height.
    pub image_size: usize,
    /// Ratio of the smallest class count to the largest. Counts follow a
    /// geometric progression between them; 1.0 is balanced.
    pub imbalance: f64,
    pub seed: u64,
    pub ranges: PerturbationRanges,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            classes: 30,
            unseen: 10,
            per_class: 100,
            held_out: 0.2,
            image_size: 64,
            imbalance: 1.0,
            seed: 7,
            ranges: PerturbationRanges::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.unseen < 2 {
            return bad(format!("unseen = {} but at least 2 unseen classes are required", self.unseen));
        }
        if self.unseen >= self.classes {
            return bad(format!(
                "unseen = {} must be smaller than classes = {} so some classes are seen",
                self.unseen, self.classes
            ));
        }
        if self.per_class == 0 || self.image_size < 8 {
            return bad("per_class must be positive and image_size at least 8".into());
        }
        if !(0.0..1.0).contains(&self.held_out) {
            return bad(format!("held_out {} outside [0, 1)", self.held_out));
        }
        if !(self.imbalance > 0.0 && self.imbalance <= 1.0) {
            return bad(format!("imbalance {} outside (0, 1]", self.imbalance));
        }
        Ok(())
    }

    /// Real-image count of class `i`.
    pub fn count(&self, i: usize) -> usize {
        if self.classes < 2 {
            return self.per_class;
        }
        let t = i as f64 / (self.classes - 1) as f64;
        ((self.per_class as f64 * self.imbalance.powf(t)).round() as usize).max(1)
    }
}

/// Renders prototypes, synthesizes perturbed reals and writes the dataset
/// under `out`. The last `unseen` classes in the seeded order are unseen.
/// Output bytes depend only on the config.
pub fn generate_benchmark(config: &BenchmarkConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let protos = render_prototypes(config.classes, config.image_size, config.seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let first_unseen = config.classes - config.unseen;
    let mut splits = String::new();
    for (i, (spec, proto)) in protos.iter().enumerate() {
        let name = format!("{i:02}_{}", spec.name());
        let seen = i < first_unseen;
        splits.push_str(&format!(
            "{name} {} {}\n",
            if seen { "seen" } else { "unseen" },
            if seen { "train" } else { "test" }
        ));
        let dir = out.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        proto.save_png(&dir.join(PROTOTYPE_FILE))?;
        let count = config.count(i);
        let held = if seen {
            ((count as f64 * config.held_out).round() as usize).min(count.saturating_sub(1))
        } else {
            0
        };
        let mut params_rng = rng::substream(config.seed, rng::PERTURBATION, i as u64);
        for j in 0..count {
            let params = config.ranges.sample(&mut params_rng);
            let seed = rng::derive_seed(config.seed, "perturb-image", (i as u64) << 32 | j as u64);
            let img = perturb(proto, &params, seed)?;
            let file = if j >= count - held {
                format!("{HELD_OUT_PREFIX}{:03}.png", j - (count - held))
            } else {
                format!("real_{j:03}.png")
            };
            img.save_png(&dir.join(file))?;
        }
    }
    let splits_path = out.join(SPLITS_FILE);
    std::fs::write(&splits_path, splits).map_err(|e| Error::io(&splits_path, e))?;
    load_manifest(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkConfig {
        BenchmarkConfig {
            classes: 5,
            unseen: 2,
            per_class: 4,
            image_size: 16,
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn counts_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_benchmark(&small(), dir.path()).unwrap();
        assert_eq!(m.classes.len(), 5);
        assert_eq!(m.num_reals(), 20);
        assert_eq!(m.seen().count(), 3);
        assert_eq!(m.unseen().count(), 2);
        for c in m.seen() {
            assert_eq!(c.reals.iter().filter(|r| r.held_out).count(), 1);
        }
    }

    #[test]
    fn byte_identical_regeneration() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_benchmark(&small(), a.path()).unwrap();
        generate_benchmark(&small(), b.path()).unwrap();
        for class in &ma.classes {
            for path in std::iter::once(&class.prototype).chain(class.reals.iter().map(|r| &r.path)) {
                let rel = path.strip_prefix(a.path()).unwrap();
                assert_eq!(std::fs::read(path).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
            }
        }
        assert_eq!(
            std::fs::read(a.path().join(SPLITS_FILE)).unwrap(),
            std::fs::read(b.path().join(SPLITS_FILE)).unwrap()
        );
    }

    #[test]
    fn rejects_bad_splits() {
        let cfg = BenchmarkConfig {
            classes: 30,
            unseen: 40,
            ..BenchmarkConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("unseen"), "{msg}");
        let cfg = BenchmarkConfig {
            unseen: 1,
            ..BenchmarkConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn imbalance_is_geometric() {
        let cfg = BenchmarkConfig {
            classes: 3,
            per_class: 100,
            imbalance: 0.25,
            ..BenchmarkConfig::default()
        };
        assert_eq!([cfg.count(0), cfg.count(1), cfg.count(2)], [100, 50, 25]);
    }
}
