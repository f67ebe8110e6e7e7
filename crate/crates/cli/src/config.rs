//! Run configuration: `key = value` settings resolved from defaults, an
//! optional config file, `VPE_*` environment variables and flags, in that
//! order of increasing precedence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vpe_core::data::BenchmarkConfig;
use vpe_core::model::{parse_lines, TrainConfig, VpeConfig};

use crate::UsageError;

pub const ENV_PREFIX: &str = "VPE_";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: VpeConfig,
    pub bench: BenchmarkConfig,
    pub train: TrainConfig,
    pub iterations: u64,
    pub validate_every: u64,
    pub log_every: u64,
    pub top_k: usize,
    pub rows: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "toy".into(),
            model: VpeConfig::toy(),
            bench: BenchmarkConfig::default(),
            train: TrainConfig {
                seed: BenchmarkConfig::default().seed,
                ..TrainConfig::default()
            },
            iterations: 2000,
            validate_every: 0,
            log_every: 100,
            top_k: 100,
            rows: 8,
            data: None,
            out: None,
            checkpoint: None,
        }
    }
}

fn preset(name: &str) -> Result<VpeConfig, UsageError> {
    match name {
        "toy" => Ok(VpeConfig::toy()),
        "traffic" => Ok(VpeConfig::default()),
        "logo" => Ok(VpeConfig::logo()),
        other => Err(UsageError(format!("unknown preset `{other}` (toy, traffic, logo)"))),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .trim()
        .parse()
        .map_err(|_| UsageError(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, UsageError> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(UsageError(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Applies settings in order. A `preset` anywhere selects the base model
    /// configuration before any other model key is applied.
    pub fn from_settings(settings: &[(String, String)]) -> Result<Self, UsageError> {
        let mut cfg = RunConfig::default();
        if let Some((_, name)) = settings.iter().rev().find(|(k, _)| k == "preset") {
            cfg.model = preset(name)?;
            cfg.preset = name.clone();
        }
        for (k, v) in settings {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.model.validate().map_err(|e| UsageError(e.to_string()))?;
        cfg.bench.ranges.sample(&mut vpe_core::rng::stream(0, "validate"));
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let core = |r: vpe_core::Result<bool>| r.map_err(|e| UsageError(e.to_string()));
        if core(self.model.set(key, value))? || core(self.bench.ranges.set(key, value))? {
            return Ok(());
        }
        match key {
            "seed" => {
                let seed = parse(key, value)?;
                self.train.seed = seed;
                self.bench.seed = seed;
            }
            "classes" => self.bench.classes = parse(key, value)?,
            "unseen" => self.bench.unseen = parse(key, value)?,
            "per_class" => self.bench.per_class = parse(key, value)?,
            "held_out" => self.bench.held_out = parse(key, value)?,
            "image_size" => self.bench.image_size = parse(key, value)?,
            "imbalance" => self.bench.imbalance = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "prototype_ratio" => self.train.prototype_ratio = parse(key, value)?,
            "augment" => self.train.augment = parse_bool(key, value)?,
            "rotation_spread" => self.train.augmentation.rotation_spread = parse(key, value)?,
            "flip_probability" => self.train.augmentation.flip_probability = parse(key, value)?,
            "lr" => self.train.adam.lr = parse(key, value)?,
            "beta1" => self.train.adam.beta1 = parse(key, value)?,
            "beta2" => self.train.adam.beta2 = parse(key, value)?,
            "adam_epsilon" => self.train.adam.epsilon = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "validate_every" => self.validate_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "rows" => self.rows = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => return Err(UsageError(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every setting, sufficient to replay the run.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        s.push_str(&self.model.to_text());
        let b = &self.bench;
        let t = &self.train;
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "classes = {}", b.classes);
        let _ = writeln!(s, "unseen = {}", b.unseen);
        let _ = writeln!(s, "per_class = {}", b.per_class);
        let _ = writeln!(s, "held_out = {:?}", b.held_out);
        let _ = writeln!(s, "image_size = {}", b.image_size);
        let _ = writeln!(s, "imbalance = {:?}", b.imbalance);
        for (k, v) in b.ranges.to_lines() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "prototype_ratio = {}", t.prototype_ratio);
        let _ = writeln!(s, "augment = {}", t.augment);
        let _ = writeln!(s, "rotation_spread = {:?}", t.augmentation.rotation_spread);
        let _ = writeln!(s, "flip_probability = {:?}", t.augmentation.flip_probability);
        let _ = writeln!(s, "lr = {:?}", t.adam.lr);
        let _ = writeln!(s, "beta1 = {:?}", t.adam.beta1);
        let _ = writeln!(s, "beta2 = {:?}", t.adam.beta2);
        let _ = writeln!(s, "adam_epsilon = {:?}", t.adam.epsilon);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "validate_every = {}", self.validate_every);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "top_k = {}", self.top_k);
        let _ = writeln!(s, "rows = {}", self.rows);
        for (key, path) in [("data", &self.data), ("out", &self.out), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = path {
                let _ = writeln!(s, "{key} = {}", p.display());
            }
        }
        s
    }

    /// Every key the config understands.
    pub fn known_keys() -> Vec<String> {
        let mut full = RunConfig::default();
        full.data = Some(PathBuf::new());
        full.out = Some(PathBuf::new());
        full.checkpoint = Some(PathBuf::new());
        parse_lines(&full.to_text())
            .expect("own output parses")
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }
}

/// `perturb.rotation` -> `VPE_PERTURB__ROTATION`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "__"))
}

/// Settings from a config file, the environment and flags, in precedence order.
pub fn collect_settings(
    file: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
    flags: Vec<(String, String)>,
) -> Result<Vec<(String, String)>, UsageError> {
    let mut settings = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        settings.extend(parse_lines(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?);
    }
    for key in RunConfig::known_keys() {
        if let Some(v) = env(&env_name(&key)) {
            settings.push((key, v));
        }
    }
    settings.extend(flags);
    Ok(settings)
}
