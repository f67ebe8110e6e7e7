use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{BnOptions, LayerSpec};

/// What the decoder is trained to reproduce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// Translate the input into its class prototype.
    Prototype,
    /// Reconstruct the input itself (plain VAE baseline).
    SelfReconstruction,
}

impl TargetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::Prototype => "prototype",
            TargetMode::SelfReconstruction => "self",
        }
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(TargetMode::Prototype),
            "self" => Ok(TargetMode::SelfReconstruction),
            other => Err(Error::InvalidArgument(format!("unknown target mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VpeConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub latent_dim: usize,
    pub encoder: [ConvStage; 3],
    pub decoder_kernel: usize,
    pub mc_samples: usize,
    pub target_mode: TargetMode,
    pub kl_weight: f64,
    pub leaky_slope: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for VpeConfig {
    /// 48x48 traffic-sign setting with the IdsiaNet-style channel plan.
    fn default() -> Self {
        VpeConfig {
            input_size: 48,
            in_channels: 3,
            out_channels: 3,
            latent_dim: 300,
            encoder: [
                ConvStage { channels: 100, kernel: 7 },
                ConvStage { channels: 150, kernel: 4 },
                ConvStage { channels: 250, kernel: 4 },
            ],
            decoder_kernel: 3,
            mc_samples: 1,
            target_mode: TargetMode::Prototype,
            kl_weight: 1.0,
            leaky_slope: 0.2,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl VpeConfig {
    /// Desk-scale 16x16 configuration used by tests and the synthetic benchmark.
    pub fn toy() -> Self {
        VpeConfig {
            input_size: 16,
            encoder: [
                ConvStage { channels: 16, kernel: 3 },
                ConvStage { channels: 32, kernel: 3 },
                ConvStage { channels: 64, kernel: 3 },
            ],
            ..Self::default()
        }
    }

    /// 64x64 logo setting.
    pub fn logo() -> Self {
        VpeConfig {
            input_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return bad(format!("input_size {} must be a positive multiple of 8", self.input_size));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if self.latent_dim == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("latent_dim and channel counts must be positive".into());
        }
        if self.encoder.iter().any(|s| s.channels == 0 || s.kernel == 0) || self.decoder_kernel % 2 == 0 {
            return bad("encoder stages need positive sizes and the decoder kernel must be odd".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky_slope {} outside [0, 1)", self.leaky_slope));
        }
        if self.kl_weight < 0.0 || self.bn_epsilon <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("kl_weight, bn_epsilon or bn_momentum out of range".into());
        }
        let mut extent = self.input_size;
        for stage in &self.encoder {
            if stage.kernel > extent + 2 * self.encoder_padding(stage.kernel) {
                return bad(format!("kernel {} too large for a {extent}px map", stage.kernel));
            }
            extent /= 2;
        }
        Ok(())
    }

    /// Padding that makes a stride-2 convolution halve an even extent.
    pub fn encoder_padding(&self, kernel: usize) -> usize {
        (kernel - 1) / 2
    }

    /// Spatial extent after the three stride-2 stages.
    pub fn bottleneck_extent(&self) -> usize {
        self.input_size / 8
    }

    pub fn flat_features(&self) -> usize {
        self.encoder[2].channels * self.bottleneck_extent().pow(2)
    }

    pub fn bn_options(&self) -> BnOptions {
        BnOptions {
            epsilon: self.bn_epsilon,
            momentum: self.bn_momentum,
        }
    }

    /// Decoder stage channel counts: input to the three convolutions, then output.
    pub fn decoder_channels(&self) -> [usize; 4] {
        [
            self.encoder[2].channels,
            self.encoder[1].channels,
            self.encoder[0].channels,
            self.out_channels,
        ]
    }

    /// Parameterized layers in canonical order.
    pub fn architecture(&self) -> Vec<LayerSpec> {
        let mut arch = Vec::new();
        let mut cin = self.in_channels;
        for (i, stage) in self.encoder.iter().enumerate() {
            arch.push(LayerSpec::Conv {
                name: format!("enc.conv{}", i + 1),
                in_channels: cin,
                out_channels: stage.channels,
                kernel: stage.kernel,
            });
            arch.push(LayerSpec::BatchNorm {
                name: format!("enc.bn{}", i + 1),
                channels: stage.channels,
            });
            cin = stage.channels;
        }
        for head in ["enc.fc_mu", "enc.fc_logvar"] {
            arch.push(LayerSpec::Linear {
                name: head.into(),
                inputs: self.flat_features(),
                outputs: self.latent_dim,
            });
        }
        arch.push(LayerSpec::Linear {
            name: "dec.fc".into(),
            inputs: self.latent_dim,
            outputs: self.flat_features(),
        });
        let ch = self.decoder_channels();
        for i in 0..3 {
            arch.push(LayerSpec::Conv {
                name: format!("dec.conv{}", i + 1),
                in_channels: ch[i],
                out_channels: ch[i + 1],
                kernel: self.decoder_kernel,
            });
            arch.push(LayerSpec::BatchNorm {
                name: format!("dec.bn{}", i + 1),
                channels: ch[i + 1],
            });
        }
        arch
    }

    /// `key = value` lines, parseable by [`VpeConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "out_channels = {}", self.out_channels);
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let plan: Vec<String> = self
            .encoder
            .iter()
            .map(|st| format!("{}x{}", st.channels, st.kernel))
            .collect();
        let _ = writeln!(s, "encoder = {}", plan.join(","));
        let _ = writeln!(s, "decoder_kernel = {}", self.decoder_kernel);
        let _ = writeln!(s, "mc_samples = {}", self.mc_samples);
        let _ = writeln!(s, "target_mode = {}", self.target_mode.as_str());
        let _ = writeln!(s, "kl_weight = {:?}", self.kl_weight);
        let _ = writeln!(s, "leaky_slope = {:?}", self.leaky_slope);
        let _ = writeln!(s, "bn_epsilon = {:?}", self.bn_epsilon);
        let _ = writeln!(s, "bn_momentum = {:?}", self.bn_momentum);
        s
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys this
    /// type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "input_size" => self.input_size = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "out_channels" => self.out_channels = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "encoder" => self.encoder = parse_plan(value)?,
            "decoder_kernel" => self.decoder_kernel = num(key, value)?,
            "mc_samples" => self.mc_samples = num(key, value)?,
            "target_mode" => self.target_mode = value.parse()?,
            "kl_weight" => self.kl_weight = num(key, value)?,
            "leaky_slope" => self.leaky_slope = num(key, value)?,
            "bn_epsilon" => self.bn_epsilon = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = VpeConfig::default();
        for (key, value) in parse_lines(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::InvalidArgument(format!("unknown model key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_plan(value: &str) -> Result<[ConvStage; 3]> {
    let stages: Vec<ConvStage> = value
        .split(',')
        .map(|part| {
            let (c, k) = part
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::InvalidArgument(format!("encoder stage `{part}` is not CxK")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("encoder stage `{part}`")))
            };
            Ok(ConvStage {
                channels: parse(c)?,
                kernel: parse(k)?,
            })
        })
        .collect::<Result<_>>()?;
    stages
        .try_into()
        .map_err(|_| Error::InvalidArgument("encoder plan needs exactly three stages".into()))
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected `key = value`", i + 1)))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = VpeConfig::toy();
        cfg.kl_weight = 0.25;
        cfg.target_mode = TargetMode::SelfReconstruction;
        assert_eq!(VpeConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = VpeConfig::toy();
        cfg.input_size = 20;
        assert!(cfg.validate().is_err());
        let mut cfg = VpeConfig::toy();
        cfg.mc_samples = 0;
        assert!(cfg.validate().is_err());
        assert!(VpeConfig::from_text("bogus = 1").is_err());
        assert!(VpeConfig::from_text("encoder = 3x3,4x4").is_err());
    }

    #[test]
    fn presets_validate() {
        for cfg in [VpeConfig::default(), VpeConfig::toy(), VpeConfig::logo()] {
            cfg.validate().unwrap();
            assert_eq!(cfg.latent_dim, 300);
        }
        assert_eq!(VpeConfig::default().flat_features(), 250 * 36);
    }
}
