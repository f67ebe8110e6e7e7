//! Central finite-difference verification of analytic gradients (64-bit).

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, fully_connected, fully_connected_backward, leaky_relu,
    leaky_relu_backward, sigmoid, sigmoid_backward, upsample2x, upsample2x_backward, BnMode, BnOptions, LayerParams,
};
use crate::rng;
use crate::tensor::Tensor;

/// Something with a scalar objective over a list of flat variables.
pub trait Checkable {
    fn variable_names(&self) -> Vec<String>;

    fn variable_mut(&mut self, index: usize) -> &mut [f64];

    /// Objective at the current variable values. Must be deterministic.
    fn loss(&mut self) -> f64;

    /// Analytic gradient of the objective, one buffer per variable.
    fn gradients(&mut self) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per variable; larger tensors are subsampled.
    pub max_coords: usize,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
    /// where `floor = floor_fraction * max |analytic|` over all variables, so
    /// near-zero coordinates are judged against the objective's gradient
    /// scale rather than against rounding noise.
    pub floor_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 64,
            floor_fraction: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

pub fn gradient_check<C: Checkable + ?Sized>(target: &mut C, opts: GradCheckOptions) -> GradCheckReport {
    let names = target.variable_names();
    let analytic = target.gradients();
    assert_eq!(names.len(), analytic.len(), "one gradient buffer per variable");
    let mut picker = rng::stream(opts.seed, "gradcheck");
    let mut report = GradCheckReport::default();
    let scale = analytic.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (opts.floor_fraction * scale).max(f64::MIN_POSITIVE);
    for (index, name) in names.into_iter().enumerate() {
        let len = target.variable_mut(index).len();
        assert_eq!(len, analytic[index].len(), "gradient length for `{name}`");
        let coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            let mut picked = sample(&mut picker, len, opts.max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut entry = GradCheckEntry {
            name,
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &c in &coords {
            let original = target.variable_mut(index)[c];
            target.variable_mut(index)[c] = original + opts.step;
            let plus = target.loss();
            target.variable_mut(index)[c] = original - opts.step;
            let minus = target.loss();
            target.variable_mut(index)[c] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[index][c];
            let err = relative_error(a, numeric, floor);
            if err > entry.max_rel_error || !err.is_finite() {
                entry.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                entry.worst_analytic = a;
                entry.worst_numeric = numeric;
            }
        }
        report.entries.push(entry);
    }
    report
}

/// Which layer a [`LayerProbe`] wraps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbeKind {
    Conv { stride: usize, padding: usize },
    BatchNorm(BnMode),
    LeakyRelu(f64),
    FullyConnected,
    Upsample2x,
    Sigmoid,
}

/// Single layer under test with objective `sum(R * layer(x))` for a fixed
/// random projection `R`.
#[derive(Clone, Debug)]
pub struct LayerProbe {
    kind: ProbeKind,
    input: Tensor<f64>,
    params: Option<LayerParams<f64>>,
    projection: Tensor<f64>,
    corrupt: bool,
}

fn normal_tensor(shape: &[usize], rng: &mut rng::Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

impl LayerProbe {
    fn build(kind: ProbeKind, input: Tensor<f64>, params: Option<LayerParams<f64>>, rng: &mut rng::Rng) -> Self {
        let mut probe = LayerProbe {
            kind,
            input,
            params,
            projection: Tensor::zeros(&[1]),
            corrupt: false,
        };
        let out_shape = probe.forward().shape().to_vec();
        probe.projection = normal_tensor(&out_shape, rng);
        probe
    }

    pub fn conv(input: [usize; 4], out_channels: usize, kernel: usize, stride: usize, padding: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "probe");
        let x = normal_tensor(&input, &mut r);
        let w = normal_tensor(&[out_channels, input[1], kernel, kernel], &mut r);
        let b = normal_tensor(&[out_channels], &mut r);
        Self::build(
            ProbeKind::Conv { stride, padding },
            x,
            Some(LayerParams::new("conv", w, b)),
            &mut r,
        )
    }

    pub fn batchnorm(input: [usize; 4], mode: BnMode, seed: u64) -> Self {
        let mut r = rng::stream(seed, "probe");
        let x = normal_tensor(&input, &mut r).map(|v| 1.5 * v + 0.3);
        let mut p = LayerParams::new(
            "bn",
            normal_tensor(&[input[1]], &mut r),
            normal_tensor(&[input[1]], &mut r),
        );
        // Seed running statistics so eval mode is usable.
        batchnorm(&x, &mut p, BnMode::Train, BnOptions::default()).expect("valid probe");
        Self::build(ProbeKind::BatchNorm(mode), x, Some(p), &mut r)
    }

    pub fn leaky_relu(shape: &[usize], slope: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "probe");
        // Keep inputs clear of the kink so central differences stay one-sided.
        let x = normal_tensor(shape, &mut r).map(|v| if v.abs() < 1e-3 { v + 1e-2 } else { v });
        Self::build(ProbeKind::LeakyRelu(slope), x, None, &mut r)
    }

    pub fn fully_connected(batch: usize, inputs: usize, outputs: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "probe");
        let x = normal_tensor(&[batch, inputs], &mut r);
        let w = normal_tensor(&[inputs, outputs], &mut r);
        let b = normal_tensor(&[outputs], &mut r);
        Self::build(ProbeKind::FullyConnected, x, Some(LayerParams::new("fc", w, b)), &mut r)
    }

    pub fn upsample2x(input: [usize; 4], seed: u64) -> Self {
        let mut r = rng::stream(seed, "probe");
        let x = normal_tensor(&input, &mut r);
        Self::build(ProbeKind::Upsample2x, x, None, &mut r)
    }

    pub fn sigmoid(shape: &[usize], seed: u64) -> Self {
        let mut r = rng::stream(seed, "probe");
        let x = normal_tensor(shape, &mut r).map(|v| 3.0 * v);
        Self::build(ProbeKind::Sigmoid, x, None, &mut r)
    }

    /// Negates the analytic gradient, for testing the checker itself.
    pub fn with_corrupted_backward(mut self) -> Self {
        self.corrupt = true;
        self
    }

    pub fn kind(&self) -> ProbeKind {
        self.kind
    }

    fn forward(&mut self) -> Tensor<f64> {
        match self.kind {
            ProbeKind::Conv { stride, padding } => {
                conv2d(&self.input, self.params.as_ref().unwrap(), stride, padding).expect("probe conv")
            }
            ProbeKind::BatchNorm(mode) => {
                batchnorm(&self.input, self.params.as_mut().unwrap(), mode, BnOptions::default())
                    .expect("probe bn")
                    .0
            }
            ProbeKind::LeakyRelu(slope) => leaky_relu(&self.input, slope),
            ProbeKind::FullyConnected => fully_connected(&self.input, self.params.as_ref().unwrap()).expect("probe fc"),
            ProbeKind::Upsample2x => upsample2x(&self.input).expect("probe upsample"),
            ProbeKind::Sigmoid => sigmoid(&self.input),
        }
    }
}

impl Checkable for LayerProbe {
    fn variable_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string()];
        if let Some(p) = &self.params {
            names.push(format!("{}.weight", p.name));
            names.push(format!("{}.bias", p.name));
        }
        names
    }

    fn variable_mut(&mut self, index: usize) -> &mut [f64] {
        match index {
            0 => self.input.data_mut(),
            1 => self.params.as_mut().unwrap().weight.data_mut(),
            2 => self.params.as_mut().unwrap().bias.data_mut(),
            _ => panic!("no variable {index}"),
        }
    }

    fn loss(&mut self) -> f64 {
        let out = self.forward();
        out.data().iter().zip(self.projection.data()).map(|(a, b)| a * b).sum()
    }

    fn gradients(&mut self) -> Vec<Vec<f64>> {
        if let Some(p) = self.params.as_mut() {
            p.zero_grad();
        }
        let upstream = self.projection.clone();
        let grad_in = match self.kind {
            ProbeKind::Conv { stride, padding } => {
                conv2d_backward(&self.input, self.params.as_mut().unwrap(), stride, padding, &upstream).unwrap()
            }
            ProbeKind::BatchNorm(mode) => {
                let p = self.params.as_mut().unwrap();
                let (_, cache) = batchnorm(&self.input, p, mode, BnOptions::default()).unwrap();
                batchnorm_backward(&cache, p, &upstream).unwrap()
            }
            ProbeKind::LeakyRelu(slope) => leaky_relu_backward(&self.input, &upstream, slope),
            ProbeKind::FullyConnected => {
                fully_connected_backward(&self.input, self.params.as_mut().unwrap(), &upstream).unwrap()
            }
            ProbeKind::Upsample2x => upsample2x_backward(&upstream).unwrap(),
            ProbeKind::Sigmoid => sigmoid_backward(&sigmoid(&self.input), &upstream),
        };
        let mut grads = vec![grad_in.into_data()];
        if let Some(p) = &self.params {
            grads.push(p.grad_weight.data().to_vec());
            grads.push(p.grad_bias.data().to_vec());
        }
        if self.corrupt {
            for g in &mut grads {
                g.iter_mut().for_each(|v| *v = -*v);
            }
        }
        grads
    }
}
