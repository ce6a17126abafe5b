//! Conditional uncertainty-aware flow matching: the mini-batch target
//! estimator, the correction term, the β-NLL loss and the training loop.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{standard_normal, Samples};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::model::{Cond, ModelOutput, VelocityModel};
use crate::par::Execution;
use crate::paths::AffinePath;

/// Log-weights below this are treated as underflow in [`uhat_minibatch`].
pub const LOG_WEIGHT_FLOOR: f64 = -700.0;
pub const TIME_EPS: f64 = 1e-3;

/// Samples per gradient shard; shards are reduced in index order.
const SHARD: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Exponent of the stop-gradient variance weight (0 = plain NLL).
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub ema_decay: f64,
    pub use_correction: bool,
    pub label_dropout: f64,
    /// Set from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Plain flow matching (unit variance) for the first `stage1_fraction` of steps.
    pub two_stage: bool,
    pub stage1_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            beta: 1.0,
            learning_rate: 1e-3,
            steps: 10_000,
            ema_decay: 0.999,
            use_correction: true,
            label_dropout: 0.1,
            seed: 0,
            two_stage: true,
            stage1_fraction: 0.7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            errs.push(format!("train.beta must lie in [0, 1], got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            errs.push(format!("train.ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(self.learning_rate > 0.0) {
            errs.push("train.learning_rate must be > 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            errs.push("train.label_dropout must lie in [0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            errs.push("train.stage1_fraction must lie in [0, 1]".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn stage1_steps(&self) -> usize {
        if self.two_stage {
            (self.steps as f64 * self.stage1_fraction).round() as usize
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll_term: f64,
    pub correction_term: f64,
}

/// Gradient of [`LossBreakdown::total`] with respect to the model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub d_mean: Vec<f64>,
    pub d_log_sigma: Vec<f64>,
}

/// Self-normalized estimate of the marginal velocity at `x_t` from a batch of
/// data points. Falls back to the anchor's conditional velocity when every
/// batch density underflows.
pub fn uhat_minibatch<V: AsRef<[f64]>>(
    path: &AffinePath,
    batch: &[V],
    x_t: &[f64],
    t: f64,
    anchor: usize,
) -> Result<Vec<f64>> {
    if batch.is_empty() || anchor >= batch.len() {
        return Err(Error::InvalidArgument("uhat needs a non-empty batch containing the anchor".into()));
    }
    let k = path.coeffs(t);
    let (a, c) = path.velocity_coeffs(t)?;
    let n = x_t.len();
    let b2 = k.beta * k.beta;
    let norm = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * b2).ln();
    let mut logw = Vec::with_capacity(batch.len());
    for x1 in batch {
        let x1 = x1.as_ref();
        check_dim(n, x1.len())?;
        let r2: f64 = x_t.iter().zip(x1).map(|(x, y)| (x - k.alpha * y).powi(2)).sum();
        logw.push(norm - 0.5 * r2 / b2);
    }
    let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx < LOG_WEIGHT_FLOOR {
        return path.cond_velocity(x_t, batch[anchor].as_ref(), t);
    }
    let mut num = vec![0.0; n];
    let mut den = 0.0;
    for (x1, lw) in batch.iter().zip(&logw) {
        let w = (lw - mx).exp();
        den += w;
        for (acc, (y, x)) in num.iter_mut().zip(x1.as_ref().iter().zip(x_t)) {
            *acc += w * (a * y + c * x);
        }
    }
    Ok(num.into_iter().map(|v| v / den).collect())
}

/// `uhat^2 - u_cond^2`, element-wise.
pub fn correction_term(uhat: &[f64], u_cond: &[f64]) -> Vec<f64> {
    uhat.iter().zip(u_cond).map(|(h, u)| h * h - u * u).collect()
}

/// β-NLL weights `var^beta`, treated as constants by the gradient.
pub fn beta_weights(var: &[f64], beta: f64) -> Vec<f64> {
    var.iter().map(|v| v.powf(beta)).collect()
}

/// Loss and its output gradient with explicit per-element weights.
pub fn cufm_loss_weighted(
    output: &ModelOutput,
    u_cond: &[f64],
    uhat: &[f64],
    weights: &[f64],
    use_correction: bool,
) -> Result<(LossBreakdown, LossGrad)> {
    let n = output.mean.len();
    check_dim(n, u_cond.len())?;
    check_dim(n, uhat.len())?;
    check_dim(n, weights.len())?;
    let inv_n = 1.0 / n as f64;
    let mut nll = 0.0;
    let mut corr = 0.0;
    let mut d_mean = Vec::with_capacity(n);
    let mut d_log_sigma = Vec::with_capacity(n);
    for i in 0..n {
        let var = output.var[i];
        if !(var > 0.0) {
            return Err(Error::non_finite(format!("variance {var} at element {i}")));
        }
        let w = weights[i];
        let r = output.mean[i] - u_cond[i];
        let u_t = if use_correction { uhat[i] * uhat[i] - u_cond[i] * u_cond[i] } else { 0.0 };
        let log_sigma = 0.5 * var.ln();
        nll += w * (r * r / (2.0 * var) + log_sigma);
        corr += w * u_t / (2.0 * var);
        d_mean.push(inv_n * w * r / var);
        // d/ds [A / (2 e^{2s}) + s] = 1 - A / e^{2s}
        d_log_sigma.push(inv_n * w * (1.0 - (u_t + r * r) / var));
    }
    let lb = LossBreakdown {
        total: (nll + corr) * inv_n,
        nll_term: nll * inv_n,
        correction_term: corr * inv_n,
    };
    if !lb.nll_term.is_finite() {
        return Err(Error::non_finite(format!("nll term ({})", lb.nll_term)));
    }
    if !lb.correction_term.is_finite() {
        return Err(Error::non_finite(format!("correction term ({})", lb.correction_term)));
    }
    Ok((lb, LossGrad { d_mean, d_log_sigma }))
}

pub fn cufm_loss(
    output: &ModelOutput,
    u_cond: &[f64],
    uhat: &[f64],
    beta: f64,
    use_correction: bool,
) -> Result<LossBreakdown> {
    Ok(cufm_loss_grad(output, u_cond, uhat, beta, use_correction)?.0)
}

pub fn cufm_loss_grad(
    output: &ModelOutput,
    u_cond: &[f64],
    uhat: &[f64],
    beta: f64,
    use_correction: bool,
) -> Result<(LossBreakdown, LossGrad)> {
    let w = beta_weights(&output.var, beta);
    cufm_loss_weighted(output, u_cond, uhat, &w, use_correction)
}

/// One training example after the stochastic draws.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub cond: Cond,
    pub u_cond: Vec<f64>,
    pub uhat: Vec<f64>,
}

/// Loss of one item and the parameter gradient, accumulated into `grad`
/// after scaling by `scale`.
pub fn item_gradient(
    model: &VelocityModel,
    item: &TrainItem,
    beta: f64,
    use_correction: bool,
    plain: bool,
    scale: f64,
    grad: &mut [f64],
) -> Result<LossBreakdown> {
    let tape = model.forward_tape(&item.x_t, item.t, item.cond)?;
    let (lb, g) = if plain {
        // unit-variance flow matching: 0.5 * mean squared residual
        let unit = ModelOutput { mean: tape.output.mean.clone(), var: vec![1.0; item.x_t.len()] };
        let (lb, mut g) = cufm_loss_weighted(&unit, &item.u_cond, &item.uhat, &unit.var, false)?;
        g.d_log_sigma.iter_mut().for_each(|d| *d = 0.0);
        (lb, g)
    } else {
        cufm_loss_grad(&tape.output, &item.u_cond, &item.uhat, beta, use_correction)?
    };
    let d_mean: Vec<f64> = g.d_mean.iter().map(|d| d * scale).collect();
    let d_ls: Vec<f64> = g.d_log_sigma.iter().map(|d| d * scale).collect();
    model.backward(&tape, &d_mean, &d_ls, Some(grad))?;
    Ok(lb)
}

/// Convenience: full parameter gradient of the loss at one `(x_t, t)`.
pub fn cufm_param_gradient(
    model: &VelocityModel,
    item: &TrainItem,
    beta: f64,
    use_correction: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut g = vec![0.0; model.num_params()];
    let lb = item_gradient(model, item, beta, use_correction, false, 1.0, &mut g)?;
    Ok((lb, g))
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, b1: f64, b2: f64) -> Self {
        Adam { lr, b1, b2, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.b1 * *m + (1.0 - self.b1) * g;
            *v = self.b2 * *v + (1.0 - self.b2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub nll_term: f64,
    pub correction_term: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VelocityModel,
    pub ema: VelocityModel,
    pub curve: Vec<LossRecord>,
}

/// Draw one mini-batch of training items.
pub fn draw_batch<R: Rng>(
    path: &AffinePath,
    data: &Samples,
    conditional: bool,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TrainItem>> {
    let n_data = data.len();
    let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n_data)).collect();
    let x1s: Vec<&[f64]> = idx.iter().map(|&i| data.points[i].as_slice()).collect();
    let labels: Vec<Option<usize>> = idx.iter().map(|&i| data.label(i)).collect();
    let mut items = Vec::with_capacity(idx.len());
    for (b, x1) in x1s.iter().enumerate() {
        let cond = match labels[b] {
            Some(l) if conditional && rng.random::<f64>() >= config.label_dropout => Cond::Class(l),
            _ => Cond::Null,
        };
        let t = TIME_EPS + (1.0 - 2.0 * TIME_EPS) * rng.random::<f64>();
        let x0 = standard_normal(x1.len(), rng);
        let x_t = path.interpolate(x1, &x0, t)?;
        let u_cond = path.cond_velocity(&x_t, x1, t)?;
        // a class-conditioned item only sees batch members of its own class
        let uhat = match cond {
            Cond::Class(c) => {
                let members: Vec<usize> = (0..x1s.len()).filter(|&j| labels[j] == Some(c)).collect();
                let sub: Vec<&[f64]> = members.iter().map(|&j| x1s[j]).collect();
                let anchor = members.iter().position(|&j| j == b).expect("anchor in own class");
                uhat_minibatch(path, &sub, &x_t, t, anchor)?
            }
            Cond::Null => uhat_minibatch(path, &x1s, &x_t, t, b)?,
        };
        items.push(TrainItem { x_t, t, cond, u_cond, uhat });
    }
    Ok(items)
}

/// Mean loss and summed parameter gradient of a batch, reduced shard by shard
/// in index order so the result does not depend on the worker count.
pub fn batch_gradient(
    model: &VelocityModel,
    items: &[TrainItem],
    beta: f64,
    use_correction: bool,
    plain: bool,
    exec: Execution,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let scale = 1.0 / items.len() as f64;
    let np = model.num_params();
    let shards = items.len().div_ceil(SHARD);
    let parts = exec.try_map(shards, |s| {
        let mut g = vec![0.0; np];
        let mut lb = LossBreakdown::default();
        for item in &items[s * SHARD..((s + 1) * SHARD).min(items.len())] {
            let l = item_gradient(model, item, beta, use_correction, plain, scale, &mut g)?;
            lb.total += l.total * scale;
            lb.nll_term += l.nll_term * scale;
            lb.correction_term += l.correction_term * scale;
        }
        Ok::<_, Error>((lb, g))
    })?;
    let mut grad = vec![0.0; np];
    let mut lb = LossBreakdown::default();
    for (l, g) in parts {
        lb.total += l.total;
        lb.nll_term += l.nll_term;
        lb.correction_term += l.correction_term;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((lb, grad))
}

pub fn train(model: VelocityModel, data: &Samples, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, config, Execution::Parallel)
}

pub fn train_with(
    mut model: VelocityModel,
    data: &Samples,
    config: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    check_dim(model.spec().dim, data.points[0].len())?;
    let conditional = model.spec().num_classes > 0;
    if conditional && data.labels.is_none() {
        return Err(Error::InvalidArgument("conditional model needs labeled data".into()));
    }
    let path = AffinePath::Linear;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.num_params(), config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut ema = model.clone();
    let stage1 = config.stage1_steps();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let items = draw_batch(&path, data, conditional, config, &mut rng)?;
        let plain = step < stage1;
        let (lb, grad) = batch_gradient(&model, &items, config.beta, config.use_correction, plain, exec)
            .map_err(|e| Error::Divergence { step, detail: e.to_string() })?;
        if !lb.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {} (nll {}, correction {})", lb.total, lb.nll_term, lb.correction_term),
            });
        }
        check_finite(&grad, "gradient").map_err(|e| Error::Divergence { step, detail: e.to_string() })?;
        adam.step(model.params_mut(), &grad);
        ema_update(ema.params_mut(), model.params(), config.ema_decay);
        curve.push(LossRecord {
            step,
            total: lb.total,
            nll_term: lb.nll_term,
            correction_term: lb.correction_term,
        });
        if step % 1000 == 0 {
            log::debug!("step {step}: loss {:.5}", lb.total);
        }
    }
    Ok(TrainOutcome { model, ema, curve })
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,total,nll_term,correction_term")?;
    for r in curve {
        writeln!(f, "{},{:e},{:e},{:e}", r.step, r.total, r.nll_term, r.correction_term)?;
    }
    f.flush()?;
    Ok(())
}
