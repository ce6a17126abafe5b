//! Mean/variance velocity network with forward- and reverse-mode derivatives.
//!
//! The network is a plain MLP: the input `x ⊕ time features ⊕ class embedding`
//! feeds a trunk of dense layers, followed by two linear heads predicting the
//! velocity mean and the per-element log standard deviation. All parameters
//! live in a single flat vector so optimizers, EMA and checkpoints can treat
//! them uniformly.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 5.0;

const CHECKPOINT_FORMAT: &str = "uaflow-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
        }
    }
}

/// Conditioning input: a class id or the null condition used by
/// classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Null,
    Class(usize),
}

impl Cond {
    pub fn from_label(label: Option<usize>) -> Self {
        label.map_or(Cond::Null, Cond::Class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of sinusoid frequencies; the embedding has twice as many features.
    pub time_frequencies: usize,
    /// 0 for an unconditional model.
    pub num_classes: usize,
    pub cond_dim: usize,
}

impl ModelSpec {
    pub fn new(dim: usize) -> Self {
        ModelSpec {
            dim,
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            time_frequencies: 4,
            num_classes: 0,
            cond_dim: 0,
        }
    }

    pub fn with_classes(mut self, classes: usize, cond_dim: usize) -> Self {
        self.num_classes = classes;
        self.cond_dim = if classes == 0 { 0 } else { cond_dim };
        self
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    fn input_width(&self) -> usize {
        self.dim + 2 * self.time_frequencies + self.cond_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("model dim must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be non-empty and positive".into()));
        }
        if self.num_classes > 0 && self.cond_dim == 0 {
            return Err(Error::InvalidArgument("conditional model needs cond_dim >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn forward(&self, p: &[f64], h: &[f64], z: &mut Vec<f64>) {
        z.clear();
        for j in 0..self.out {
            let row = &p[self.w + j * self.inp..self.w + (j + 1) * self.inp];
            let mut acc = p[self.b + j];
            for (w, x) in row.iter().zip(h) {
                acc += w * x;
            }
            z.push(acc);
        }
    }

    fn linear(&self, p: &[f64], h: &[f64], z: &mut Vec<f64>) {
        z.clear();
        for j in 0..self.out {
            let row = &p[self.w + j * self.inp..self.w + (j + 1) * self.inp];
            z.push(row.iter().zip(h).map(|(w, x)| w * x).sum());
        }
    }

    /// Accumulates parameter gradients (if requested) and returns the input adjoint.
    fn backward(&self, p: &[f64], h: &[f64], dz: &[f64], grad: Option<&mut [f64]>, dh: &mut [f64]) {
        if let Some(g) = grad {
            for j in 0..self.out {
                let d = dz[j];
                if d == 0.0 {
                    continue;
                }
                g[self.b + j] += d;
                let gw = &mut g[self.w + j * self.inp..self.w + (j + 1) * self.inp];
                for (gw, x) in gw.iter_mut().zip(h) {
                    *gw += d * x;
                }
            }
        }
        for j in 0..self.out {
            let d = dz[j];
            if d == 0.0 {
                continue;
            }
            let row = &p[self.w + j * self.inp..self.w + (j + 1) * self.inp];
            for (a, w) in dh.iter_mut().zip(row) {
                *a += d * w;
            }
        }
    }
}

/// Mean and per-element variance of the predicted velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ModelOutput {
    pub fn sigma(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

/// Intermediate values of one forward pass, kept for reverse mode.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    raw_log_sigma: Vec<f64>,
    cond_row: Option<usize>,
    pub output: ModelOutput,
    pub log_sigma: Vec<f64>,
}

/// A velocity field with mean/variance heads and the derivative queries the
/// sampler, uncertainty propagation and guidance need.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn num_classes(&self) -> usize {
        0
    }

    fn forward(&self, x: &[f64], t: f64, cond: Cond) -> Result<ModelOutput>;

    /// `J v` where `J` is the Jacobian of the mean with respect to `x`.
    fn jvp_mean(&self, x: &[f64], t: f64, cond: Cond, v: &[f64]) -> Result<Vec<f64>>;

    /// Gradient with respect to `x` of `sum_i cot_i * var_i(x)`.
    fn var_vjp(&self, x: &[f64], t: f64, cond: Cond, cot: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    spec: ModelSpec,
    params: Vec<f64>,
    layers: Vec<Dense>,
    embed: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    seed: u64,
    spec: ModelSpec,
    params: Vec<f64>,
}

fn layout(spec: &ModelSpec) -> (Vec<Dense>, usize, usize) {
    let mut off = 0;
    let mut layers = Vec::new();
    let push = |inp: usize, out: usize, off: &mut usize| {
        let d = Dense { inp, out, w: *off, b: *off + inp * out };
        *off += inp * out + out;
        d
    };
    let mut prev = spec.input_width();
    for &h in &spec.hidden {
        layers.push(push(prev, h, &mut off));
        prev = h;
    }
    layers.push(push(prev, spec.dim, &mut off));
    layers.push(push(prev, spec.dim, &mut off));
    let embed = off;
    let total = off + if spec.num_classes > 0 { (spec.num_classes + 1) * spec.cond_dim } else { 0 };
    (layers, embed, total)
}

impl VelocityModel {
    /// Random trunk and embedding, zero heads: the fresh model predicts mean 0
    /// and variance 1 everywhere.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (layers, embed, total) = layout(&spec);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = layers.len() - 2;
        for layer in &layers[..trunk] {
            let std = (1.0 / layer.inp as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut params[layer.w..layer.w + layer.inp * layer.out] {
                *w = normal.sample(&mut rng);
            }
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for e in &mut params[embed..] {
            *e = normal.sample(&mut rng);
        }
        Ok(VelocityModel { spec, params, layers, embed, seed })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (layers, embed, total) = layout(&spec);
        if params.len() != total {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match architecture ({total})",
                params.len()
            )));
        }
        Ok(VelocityModel { spec, params, layers, embed, seed })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Index range of the embedding row used for `cond`.
    pub fn embedding_range(&self, cond: Cond) -> Option<std::ops::Range<usize>> {
        let row = self.cond_row(cond).ok()??;
        let start = self.embed + row * self.spec.cond_dim;
        Some(start..start + self.spec.cond_dim)
    }

    /// Index range of the two output heads (mean head, then log-sigma head).
    pub fn head_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.layers.len();
        let span = |d: &Dense| d.w..d.b + d.out;
        (span(&self.layers[n - 2]), span(&self.layers[n - 1]))
    }

    fn cond_row(&self, cond: Cond) -> Result<Option<usize>> {
        let k = self.spec.num_classes;
        match cond {
            Cond::Null if k == 0 => Ok(None),
            Cond::Null => Ok(Some(k)),
            Cond::Class(id) if id < k => Ok(Some(id)),
            Cond::Class(id) => Err(Error::UnknownClass { id, classes: k }),
        }
    }

    fn build_input(&self, x: &[f64], t: f64, cond: Cond) -> Result<(Vec<f64>, Option<usize>)> {
        check_dim(self.spec.dim, x.len())?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("model input x"));
        }
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        let row = self.cond_row(cond)?;
        let mut input = Vec::with_capacity(self.spec.input_width());
        input.extend_from_slice(x);
        for k in 0..self.spec.time_frequencies {
            let w = PI * (1u64 << k) as f64;
            input.push((w * t).sin());
            input.push((w * t).cos());
        }
        if let Some(r) = row {
            let s = self.embed + r * self.spec.cond_dim;
            input.extend_from_slice(&self.params[s..s + self.spec.cond_dim]);
        }
        Ok((input, row))
    }

    pub fn forward_tape(&self, x: &[f64], t: f64, cond: Cond) -> Result<Tape> {
        let (input, cond_row) = self.build_input(x, t, cond)?;
        let p = &self.params;
        let act = self.spec.activation;
        let trunk = self.layers.len() - 2;
        let mut pre = Vec::with_capacity(trunk);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(trunk);
        for (i, layer) in self.layers[..trunk].iter().enumerate() {
            let h = if i == 0 { &input } else { &post[i - 1] };
            let mut z = Vec::new();
            layer.forward(p, h, &mut z);
            let a: Vec<f64> = z.iter().map(|&z| act.apply(z)).collect();
            pre.push(z);
            post.push(a);
        }
        let last = post.last().expect("at least one hidden layer");
        let mut mean = Vec::new();
        self.layers[trunk].forward(p, last, &mut mean);
        let mut raw = Vec::new();
        self.layers[trunk + 1].forward(p, last, &mut raw);
        let log_sigma: Vec<f64> = raw.iter().map(|s| s.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)).collect();
        let var: Vec<f64> = log_sigma.iter().map(|s| (2.0 * s).exp()).collect();
        if !mean.iter().chain(&var).all(|v| v.is_finite()) {
            return Err(Error::non_finite("model output"));
        }
        Ok(Tape {
            input,
            pre,
            post,
            raw_log_sigma: raw,
            cond_row,
            output: ModelOutput { mean, var },
            log_sigma,
        })
    }

    /// Reverse pass. `d_mean` and `d_log_sigma` are adjoints of the mean and
    /// the (clamped) log-sigma outputs. Parameter gradients are accumulated
    /// into `grad` when given; the adjoint of `x` is returned.
    pub fn backward(
        &self,
        tape: &Tape,
        d_mean: &[f64],
        d_log_sigma: &[f64],
        mut grad: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        let n = self.spec.dim;
        check_dim(n, d_mean.len())?;
        check_dim(n, d_log_sigma.len())?;
        let p = &self.params;
        let act = self.spec.activation;
        let trunk = self.layers.len() - 2;
        // the clamp blocks gradient flow outside [LOG_SIGMA_MIN, LOG_SIGMA_MAX]
        let d_raw: Vec<f64> = d_log_sigma
            .iter()
            .zip(&tape.raw_log_sigma)
            .map(|(&d, &r)| if (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&r) { d } else { 0.0 })
            .collect();
        let last = &tape.post[trunk - 1];
        let mut dh = vec![0.0; last.len()];
        self.layers[trunk].backward(p, last, d_mean, grad.as_deref_mut(), &mut dh);
        self.layers[trunk + 1].backward(p, last, &d_raw, grad.as_deref_mut(), &mut dh);
        for i in (0..trunk).rev() {
            let dz: Vec<f64> = dh
                .iter()
                .zip(&tape.pre[i])
                .map(|(d, &z)| d * act.derivative(z))
                .collect();
            let h = if i == 0 { &tape.input } else { &tape.post[i - 1] };
            let mut dh_in = vec![0.0; h.len()];
            self.layers[i].backward(p, h, &dz, grad.as_deref_mut(), &mut dh_in);
            dh = dh_in;
        }
        if let (Some(g), Some(row)) = (grad, tape.cond_row) {
            let off = n + 2 * self.spec.time_frequencies;
            let s = self.embed + row * self.spec.cond_dim;
            for (g, d) in g[s..s + self.spec.cond_dim].iter_mut().zip(&dh[off..]) {
                *g += d;
            }
        }
        dh.truncate(n);
        if !dh.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("input gradient"));
        }
        Ok(dh)
    }

    /// Dense Jacobian of the mean head with respect to `x`, one reverse pass
    /// per output row. Returned row-major: `jac[i][j] = d mean_i / d x_j`.
    pub fn jacobian_mean(&self, x: &[f64], t: f64, cond: Cond) -> Result<Vec<Vec<f64>>> {
        let tape = self.forward_tape(x, t, cond)?;
        let n = self.spec.dim;
        let zero = vec![0.0; n];
        (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                self.backward(&tape, &e, &zero, None)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            spec: self.spec.clone(),
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
        }
        Self::from_params(file.spec, file.params, file.seed)
    }
}

impl VelocityField for VelocityModel {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn forward(&self, x: &[f64], t: f64, cond: Cond) -> Result<ModelOutput> {
        Ok(self.forward_tape(x, t, cond)?.output)
    }

    fn jvp_mean(&self, x: &[f64], t: f64, cond: Cond, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.spec.dim, v.len())?;
        let (input, _) = self.build_input(x, t, cond)?;
        let p = &self.params;
        let act = self.spec.activation;
        let trunk = self.layers.len() - 2;
        let mut h = input;
        let mut dh = vec![0.0; h.len()];
        dh[..v.len()].copy_from_slice(v);
        let mut z = Vec::new();
        let mut dz = Vec::new();
        for layer in &self.layers[..trunk] {
            layer.forward(p, &h, &mut z);
            layer.linear(p, &dh, &mut dz);
            h = z.iter().map(|&z| act.apply(z)).collect();
            dh = z.iter().zip(&dz).map(|(&z, d)| act.derivative(z) * d).collect();
        }
        let mut out = Vec::new();
        self.layers[trunk].linear(p, &dh, &mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("jvp"));
        }
        Ok(out)
    }

    fn var_vjp(&self, x: &[f64], t: f64, cond: Cond, cot: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.spec.dim, cot.len())?;
        let tape = self.forward_tape(x, t, cond)?;
        // var = exp(2 s)  =>  d var / d s = 2 var
        let d_s: Vec<f64> = cot.iter().zip(&tape.output.var).map(|(c, v)| 2.0 * c * v).collect();
        let zero = vec![0.0; self.spec.dim];
        self.backward(&tape, &zero, &d_s, None)
    }
}
