//! Mini-batch training with prototype/real sampling and paired augmentation.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{AugmentConfig, AugmentParams, Dataset, ImageTensor, PairedSample};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, TargetMode, Vpe, VpeConfig};
use crate::nn::{adam_step, AdamConfig, AdamState};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Real images drawn per prototype image: each batch slot holds a
    /// prototype with probability `1 / (prototype_ratio + 1)`.
    pub prototype_ratio: usize,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            prototype_ratio: 200,
            augment: true,
            augmentation: AugmentConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One step's batch-mean loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// In-memory training pairs: one prototype per training class and the real
/// images of those classes.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    prototypes: BTreeMap<usize, ImageTensor>,
    reals: Vec<(ImageTensor, usize)>,
}

impl TrainingSet {
    pub fn new(prototypes: BTreeMap<usize, ImageTensor>, reals: Vec<(ImageTensor, usize)>) -> Result<Self> {
        if reals.is_empty() || prototypes.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if let Some((_, label)) = reals.iter().find(|(_, l)| !prototypes.contains_key(l)) {
            return Err(Error::MissingPrototype(format!("label {label}")));
        }
        let (c, h, w) = {
            let p = prototypes.values().next().expect("non-empty");
            (p.channels(), p.height(), p.width())
        };
        let same = |i: &ImageTensor| (i.channels(), i.height(), i.width()) == (c, h, w);
        if !prototypes.values().all(same) || !reals.iter().all(|(i, _)| same(i)) {
            return Err(Error::Dataset("training images differ in size".into()));
        }
        Ok(TrainingSet { prototypes, reals })
    }

    pub fn from_pairs(pairs: Vec<PairedSample>) -> Result<Self> {
        let mut prototypes = BTreeMap::new();
        let mut reals = Vec::with_capacity(pairs.len());
        for p in pairs {
            prototypes.entry(p.label).or_insert(p.prototype);
            reals.push((p.real, p.label));
        }
        Self::new(prototypes, reals)
    }

    /// Loads every training-split real of `dataset` with its prototype.
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        Self::from_pairs(dataset.training_pairs()?)
    }

    pub fn num_reals(&self) -> usize {
        self.reals.len()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let p = self.prototypes.values().next().expect("non-empty");
        (p.channels(), p.height(), p.width())
    }
}

/// A drawn mini-batch before it reaches the network.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Slots that hold a prototype image as input.
    pub prototype_slots: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Vpe<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub trace: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(model_config: VpeConfig, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let model = Vpe::new(model_config, rng::derive_seed(config.seed, rng::INIT, 0))?;
        Ok(Trainer {
            model,
            adam: AdamState::new(config.adam),
            config,
            iteration: 0,
            trace: Vec::new(),
        })
    }

    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Self {
        Trainer {
            model: checkpoint.model,
            adam: checkpoint.adam,
            config,
            iteration: checkpoint.iteration,
            trace: Vec::new(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
            seed: self.config.seed,
        }
    }

    fn check_set(&self, set: &TrainingSet) -> Result<()> {
        let cfg = &self.model.config;
        let (c, h, w) = set.image_shape();
        if h != cfg.input_size || w != cfg.input_size || c != cfg.in_channels || c != cfg.out_channels {
            return Err(Error::Dataset(format!(
                "training images are {c}x{h}x{w} but the model expects {}x{s}x{s} in and {} channels out",
                cfg.in_channels,
                cfg.out_channels,
                s = cfg.input_size
            )));
        }
        Ok(())
    }

    /// The batch for `iteration`, a pure function of the seed and iteration.
    pub fn batch(&self, set: &TrainingSet, iteration: u64) -> Result<Batch> {
        let seed = self.config.seed;
        let mut pick = rng::substream(seed, rng::SAMPLING, iteration);
        let mut aug = rng::substream(seed, rng::AUGMENTATION, iteration);
        let classes: Vec<usize> = set.prototypes.keys().copied().collect();
        let n = self.config.batch_size;
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut prototype_slots = Vec::with_capacity(n);
        for _ in 0..n {
            let is_proto = pick.random_range(0..=self.config.prototype_ratio) == 0;
            let (input, label) = if is_proto {
                let label = classes[pick.random_range(0..classes.len())];
                (&set.prototypes[&label], label)
            } else {
                let (img, label) = &set.reals[pick.random_range(0..set.reals.len())];
                (img, *label)
            };
            let target = match self.model.config.target_mode {
                TargetMode::Prototype => &set.prototypes[&label],
                TargetMode::SelfReconstruction => input,
            };
            if self.config.augment {
                let t = AugmentParams::draw(&self.config.augmentation, &mut aug);
                inputs.push(t.apply(input));
                targets.push(t.apply(target));
            } else {
                inputs.push(input.clone());
                targets.push(target.clone());
            }
            labels.push(label);
            prototype_slots.push(is_proto);
        }
        Ok(Batch {
            input: ImageTensor::stack(&inputs)?,
            target: ImageTensor::stack(&targets)?,
            labels,
            prototype_slots,
        })
    }

    fn noise(&self, iteration: u64) -> Result<Tensor<f32>> {
        let cfg = &self.model.config;
        let shape = [cfg.mc_samples, self.config.batch_size, cfg.latent_dim];
        let mut rng = rng::substream(self.config.seed, rng::NOISE, iteration);
        let len = shape.iter().product();
        let data = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(&shape, data)
    }

    /// One optimizer step. Returns the loss measured before the update.
    pub fn step(&mut self, set: &TrainingSet) -> Result<LossRecord> {
        self.check_set(set)?;
        let it = self.iteration;
        let batch = self.batch(set, it)?;
        let eps = self.noise(it)?;
        self.model.zero_grad();
        let loss = self.model.loss(&batch.input, &batch.target, &eps, true)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {it}")));
        }
        adam_step(&mut self.model.layers, &mut self.adam)?;
        self.iteration += 1;
        let record = LossRecord {
            iteration: it,
            loss: loss.total,
            recon: loss.recon,
            kl: loss.kl,
        };
        self.trace.push(record);
        Ok(record)
    }

    /// Runs `iterations` steps, calling `hook` after each one. The hook may
    /// stop training early by returning an error.
    pub fn run(
        &mut self,
        set: &TrainingSet,
        iterations: u64,
        mut hook: impl FnMut(&mut Trainer, &LossRecord) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..iterations {
            let record = self.step(set)?;
            hook(self, &record)?;
        }
        Ok(())
    }
}

/// Trailing moving average of the total loss over `window` steps.
pub fn smoothed_loss(trace: &[LossRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut sum = 0.0;
    for (i, r) in trace.iter().enumerate() {
        sum += r.loss;
        if i >= window {
            sum -= trace[i - window].loss;
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_prototypes;

    fn tiny_config() -> VpeConfig {
        VpeConfig {
            latent_dim: 8,
            encoder: [
                crate::model::ConvStage { channels: 4, kernel: 3 },
                crate::model::ConvStage { channels: 4, kernel: 3 },
                crate::model::ConvStage { channels: 4, kernel: 3 },
            ],
            ..VpeConfig::toy()
        }
    }

    fn tiny_set() -> TrainingSet {
        let protos = render_prototypes(3, 16, 2).unwrap();
        let mut map = BTreeMap::new();
        let mut reals = Vec::new();
        for (label, (_, img)) in protos.into_iter().enumerate() {
            reals.push((img.rotate(10.0, crate::data::Resample::Bilinear), label));
            map.insert(label, img);
        }
        TrainingSet::new(map, reals).unwrap()
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 6,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fixed_seed_gives_identical_traces() {
        let set = tiny_set();
        let mut a = Trainer::new(tiny_config(), train_cfg()).unwrap();
        let mut b = Trainer::new(tiny_config(), train_cfg()).unwrap();
        a.run(&set, 3, |_, _| Ok(())).unwrap();
        b.run(&set, 3, |_, _| Ok(())).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn batch_size_is_exact() {
        let set = tiny_set();
        let t = Trainer::new(tiny_config(), TrainConfig::default()).unwrap();
        let b = t.batch(&set, 0).unwrap();
        assert_eq!(b.input.shape(), &[128, 3, 16, 16]);
        assert_eq!(b.labels.len(), 128);
    }

    #[test]
    fn prototype_draws_average_one_in_201() {
        let set = tiny_set();
        let t = Trainer::new(
            tiny_config(),
            TrainConfig {
                augment: false,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let mut protos = 0usize;
        let iters = 400;
        for it in 0..iters {
            protos += t.batch(&set, it).unwrap().prototype_slots.iter().filter(|&&p| p).count();
        }
        let n = (iters as usize * 128) as f64;
        let p = 1.0 / 201.0;
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((protos as f64 - n * p).abs() < 4.0 * sd, "{protos} vs {}", n * p);
    }

    #[test]
    fn self_mode_only_swaps_the_target() {
        let set = tiny_set();
        let mut vae_cfg = tiny_config();
        vae_cfg.target_mode = TargetMode::SelfReconstruction;
        let vpe = Trainer::new(tiny_config(), train_cfg()).unwrap();
        let vae = Trainer::new(vae_cfg, train_cfg()).unwrap();
        let a = vpe.batch(&set, 5).unwrap();
        let b = vae.batch(&set, 5).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.labels, b.labels);
        assert_eq!(b.target, b.input);
        assert_ne!(a.target, a.input);
    }

    #[test]
    fn rejects_missing_prototype_and_empty_sets() {
        let img = ImageTensor::zeros(3, 16, 16);
        let mut map = BTreeMap::new();
        map.insert(0, img.clone());
        assert!(matches!(
            TrainingSet::new(map.clone(), vec![(img.clone(), 1)]),
            Err(Error::MissingPrototype(_))
        ));
        assert!(TrainingSet::new(map, Vec::new()).is_err());
    }

    #[test]
    fn smoothing_window() {
        let trace: Vec<LossRecord> = [4.0, 2.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &l)| LossRecord {
                iteration: i as u64,
                loss: l,
                recon: l,
                kl: 0.0,
            })
            .collect();
        assert_eq!(smoothed_loss(&trace, 2), vec![4.0, 3.0, 1.0]);
    }
}
