//! Binary checkpoint container.
//!
//! Layout (little-endian): `VPEC`, `u32` version, `u32`-prefixed config text,
//! then a `u32` count of parameter records and the records, then a `u32`
//! count of optimizer records and those. A record is a `u32`-prefixed UTF-8
//! name, a `u32` rank, `u64` extents and raw `f32` values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{parse_lines, Vpe, VpeConfig};
use crate::nn::{init_params, AdamConfig, AdamState, Moments, RunningStats};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPEC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Vpe<f32>,
    pub adam: AdamState<f32>,
    pub iteration: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(model: Vpe<f32>) -> Self {
        Checkpoint {
            model,
            adam: AdamState::default(),
            iteration: 0,
            seed: 0,
        }
    }

    fn header_text(&self) -> String {
        let mut s = self.model.config.to_text();
        let a = &self.adam.config;
        let _ = writeln!(s, "iteration = {}", self.iteration);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "adam.step = {}", self.adam.step);
        let _ = writeln!(s, "adam.lr = {:?}", a.lr);
        let _ = writeln!(s, "adam.beta1 = {:?}", a.beta1);
        let _ = writeln!(s, "adam.beta2 = {:?}", a.beta2);
        let _ = writeln!(s, "adam.epsilon = {:?}", a.epsilon);
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.header_text());

        let mut params: Vec<(String, &Tensor<f32>)> = Vec::new();
        for l in &self.model.layers {
            params.push((format!("{}.weight", l.name), &l.weight));
            params.push((format!("{}.bias", l.name), &l.bias));
            if let Some(r) = &l.running {
                params.push((format!("{}.running_mean", l.name), &r.mean));
                params.push((format!("{}.running_var", l.name), &r.var));
            }
        }
        put_records(&mut out, &params);

        let mut moments: Vec<(String, &Tensor<f32>)> = Vec::new();
        for m in &self.adam.moments {
            moments.push((format!("{}.m", m.name), &m.first));
            moments.push((format!("{}.v", m.name), &m.second));
        }
        put_records(&mut out, &moments);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header = r.string()?;
        let mut config = VpeConfig::default();
        let mut meta = BTreeMap::new();
        for (k, v) in parse_lines(&header)? {
            if !config.set(&k, &v)? {
                meta.insert(k, v);
            }
        }
        config.validate()?;
        let get = |key: &str| -> Result<&String> {
            meta.get(key)
                .ok_or_else(|| Error::Format(format!("header is missing `{key}`")))
        };
        let num_u64 = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad `{key}`")))
        };
        let num_f64 = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad `{key}`")))
        };
        let adam_config = AdamConfig {
            lr: num_f64("adam.lr")?,
            beta1: num_f64("adam.beta1")?,
            beta2: num_f64("adam.beta2")?,
            epsilon: num_f64("adam.epsilon")?,
        };

        let mut params = r.records()?;
        let mut layers = init_params::<f32>(&config.architecture(), 0);
        for layer in &mut layers {
            let mut take = |suffix: &str, required: bool, like: Option<&Tensor<f32>>| -> Result<Option<Tensor<f32>>> {
                let name = format!("{}.{suffix}", layer.name);
                match params.remove(&name) {
                    Some(t) => {
                        if let Some(like) = like {
                            if like.shape() != t.shape() {
                                return Err(Error::Format(format!(
                                    "`{name}` has shape {:?}, expected {:?}",
                                    t.shape(),
                                    like.shape()
                                )));
                            }
                        }
                        Ok(Some(t))
                    }
                    None if required => Err(Error::Format(format!("missing record `{name}`"))),
                    None => Ok(None),
                }
            };
            let weight = take("weight", true, Some(&layer.weight))?.expect("required");
            let bias = take("bias", true, Some(&layer.bias))?.expect("required");
            let mean = take("running_mean", false, Some(&layer.bias))?;
            let var = take("running_var", false, Some(&layer.bias))?;
            layer.running = match (mean, var) {
                (Some(mean), Some(var)) => Some(RunningStats { mean, var }),
                (None, None) => None,
                _ => {
                    return Err(Error::Format(format!(
                        "layer `{}` has only one running statistic",
                        layer.name
                    )))
                }
            };
            layer.weight = weight;
            layer.bias = bias;
        }
        if let Some(name) = params.keys().next() {
            return Err(Error::Format(format!("unexpected record `{name}`")));
        }

        let mut stored = r.records_ordered()?;
        let mut moments = Vec::new();
        if !stored.is_empty() {
            if stored.len() != 4 * layers.len() {
                return Err(Error::Format(format!(
                    "{} optimizer records for {} layers",
                    stored.len(),
                    layers.len()
                )));
            }
            let mut it = stored.drain(..);
            for layer in &layers {
                for (suffix, like) in [("weight", &layer.weight), ("bias", &layer.bias)] {
                    let name = format!("{}.{suffix}", layer.name);
                    let (n1, first) = it.next().expect("counted");
                    let (n2, second) = it.next().expect("counted");
                    if n1 != format!("{name}.m") || n2 != format!("{name}.v") {
                        return Err(Error::Format(format!("optimizer records out of order at `{n1}`")));
                    }
                    if first.shape() != like.shape() || second.shape() != like.shape() {
                        return Err(Error::Format(format!("optimizer state for `{name}` has the wrong shape")));
                    }
                    moments.push(Moments { name, first, second });
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model: Vpe::from_layers(config, layers)?,
            adam: AdamState {
                config: adam_config,
                step: num_u64("adam.step")?,
                moments,
            },
            iteration: num_u64("iteration")?,
            seed: num_u64("seed")?,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_records(out: &mut Vec<u8>, records: &[(String, &Tensor<f32>)]) {
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        put_str(out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&l| l.checked_mul(4).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::Format(format!("`{name}` extents {shape:?} exceed the file")))?;
        let raw = self.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }

    fn records_ordered(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32()?;
        (0..n).map(|_| self.record()).collect()
    }

    fn records(&mut self) -> Result<BTreeMap<String, Tensor<f32>>> {
        let mut out = BTreeMap::new();
        for (name, t) in self.records_ordered()? {
            if out.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate record `{name}`")));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvStage;
    use crate::nn::adam_step;

    fn small_model() -> Vpe<f32> {
        let cfg = VpeConfig {
            latent_dim: 6,
            encoder: [ConvStage { channels: 3, kernel: 3 }; 3],
            ..VpeConfig::toy()
        };
        Vpe::new(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = small_model();
        let x = Tensor::full(&[2, 3, 16, 16], 0.3f32);
        model.calibrate_batchnorm(&x).unwrap();
        let mut adam = AdamState::default();
        for l in &mut model.layers {
            l.grad_weight.fill(0.01);
        }
        adam_step(&mut model.layers, &mut adam).unwrap();
        let ck = Checkpoint {
            model,
            adam,
            iteration: 42,
            seed: 9,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let bytes = Checkpoint::new(small_model()).to_bytes();
        assert_eq!(&bytes[..4], b"VPEC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = Checkpoint::new(small_model()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vpec");
        let ck = Checkpoint::new(small_model());
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }
}
