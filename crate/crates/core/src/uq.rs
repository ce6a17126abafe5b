//! Element-wise variance propagation along the sampling trajectory.
//!
//! The update per Euler step is
//! `Var' = Var + (sigma * dt)^2 + 2 dt Cov(x, u)` with the state/velocity
//! covariance approximated in one of three ways (see [`CovOption`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::standard_normal;
use crate::error::{check_dim, Error, Result};
use crate::par::Execution;
use crate::paths::AffinePath;
use crate::sample::{integrate, FlowState, LambdaLog, SamplerConfig, Trajectory, VelocityProvider};
use crate::stats::sample_variance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovOption {
    /// Ignore the state/velocity coupling.
    Zero,
    /// Hutchinson estimate of `diag(J) ⊙ Var` from Rademacher-probe JVPs.
    HutchinsonJvp { probes: usize },
    /// Sample moments from draws `x_i ~ N(mean, diag(var))`.
    MonteCarlo { samples: usize },
}

impl Default for CovOption {
    fn default() -> Self {
        CovOption::HutchinsonJvp { probes: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqConfig {
    pub cov: CovOption,
    /// Update the variance every `cadence` sampling steps.
    pub cadence: usize,
    /// Add the Monte-Carlo spread of the mean velocity to the injected noise.
    pub include_mean_spread_var: bool,
    pub spread_samples: usize,
    /// Fraction of elements averaged into the scalar score.
    pub top_fraction: f64,
}

impl Default for UqConfig {
    fn default() -> Self {
        UqConfig {
            cov: CovOption::default(),
            cadence: 1,
            include_mean_spread_var: false,
            spread_samples: 10,
            top_fraction: 0.1,
        }
    }
}

impl UqConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.cadence == 0 {
            errs.push("uq.cadence must be >= 1".to_string());
        }
        match self.cov {
            CovOption::HutchinsonJvp { probes: 0 } => errs.push("uq.cov probes must be >= 1".to_string()),
            CovOption::MonteCarlo { samples } if samples < 2 => errs.push("uq.cov samples must be >= 2".to_string()),
            _ => {}
        }
        if self.include_mean_spread_var && self.spread_samples < 2 {
            errs.push("uq.spread_samples must be >= 2".to_string());
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            errs.push(format!("uq.top_fraction must lie in (0, 1], got {}", self.top_fraction));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Per-sample random stream: `mix(seed) ^ index`. Mixing the run seed first
/// keeps runs with nearby seeds from sharing per-sample streams.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed) ^ index)
}

/// SplitMix64 finalizer (a bijection on `u64`).
pub fn mix_seed(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rademacher<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// `(1/S) Σ (σx ⊙ r) ⊙ J (σx ⊙ r)` with Rademacher `r`, an unbiased
/// estimate of `diag(J) ⊙ var_x`.
pub fn hutchinson_diag<P: VelocityProvider + ?Sized, R: Rng + ?Sized>(
    provider: &P,
    x: &[f64],
    t: f64,
    step: usize,
    var_x: &[f64],
    probes: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dim(x.len(), var_x.len())?;
    if probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    let n = x.len();
    let sd: Vec<f64> = var_x.iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut acc = vec![0.0; n];
    for _ in 0..probes {
        let r = rademacher(n, rng);
        let v: Vec<f64> = sd.iter().zip(&r).map(|(s, r)| s * r).collect();
        let jv = provider.jvp(x, t, step, &v)?;
        for i in 0..n {
            acc[i] += v[i] * jv[i];
        }
    }
    Ok(acc.into_iter().map(|a| a / probes as f64).collect())
}

/// Element-wise sample covariance of state and mean velocity over `samples`
/// Gaussian draws around the mean state.
pub fn monte_carlo_cov<P: VelocityProvider + ?Sized, R: Rng + ?Sized>(
    provider: &P,
    x: &[f64],
    t: f64,
    step: usize,
    var_x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if samples < 2 {
        return Err(Error::InvalidArgument("sample covariance needs at least two draws".into()));
    }
    let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..samples)
        .map(|_| {
            let xi = perturb(x, var_x, rng);
            provider.velocity(&xi, t, step).map(|v| (xi, v.mean))
        })
        .collect::<Result<_>>()?;
    let s = samples as f64;
    Ok((0..x.len())
        .map(|j| {
            let mx = draws.iter().map(|(xi, _)| xi[j]).sum::<f64>() / s;
            let mu = draws.iter().map(|(_, u)| u[j]).sum::<f64>() / s;
            draws.iter().map(|(xi, u)| (xi[j] - mx) * (u[j] - mu)).sum::<f64>() / (s - 1.0)
        })
        .collect())
}

fn perturb<R: Rng + ?Sized>(x: &[f64], var: &[f64], rng: &mut R) -> Vec<f64> {
    x.iter()
        .zip(var)
        .map(|(m, v)| m + v.max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Variance of the mean velocity under `x ~ N(mean, diag(var))`.
pub fn mean_spread_var<P: VelocityProvider + ?Sized, R: Rng + ?Sized>(
    provider: &P,
    x: &[f64],
    t: f64,
    step: usize,
    var_x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let draws: Vec<Vec<f64>> = (0..samples)
        .map(|_| provider.velocity(&perturb(x, var_x, rng), t, step).map(|v| v.mean))
        .collect::<Result<_>>()?;
    Ok((0..x.len())
        .map(|j| sample_variance(&draws.iter().map(|u| u[j]).collect::<Vec<_>>()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagated {
    pub var: Vec<f64>,
    /// Elements clipped at zero in this update.
    pub floored: usize,
}

/// Advance `state.var` by one (possibly cadence-stretched) Euler step of size
/// `dt`. `velocity_var` is the predicted velocity variance at `state.mean`.
pub fn propagate_variance_with<P: VelocityProvider + ?Sized, R: Rng + ?Sized>(
    state: &FlowState,
    velocity_var: &[f64],
    provider: &P,
    step: usize,
    dt: f64,
    config: &UqConfig,
    rng: &mut R,
) -> Result<Propagated> {
    let n = state.mean.len();
    check_dim(n, velocity_var.len())?;
    check_dim(n, state.var.len())?;
    let has_spread = state.var.iter().any(|&v| v > 0.0);
    let cov = match config.cov {
        CovOption::Zero => vec![0.0; n],
        _ if !has_spread => vec![0.0; n],
        CovOption::HutchinsonJvp { probes } => {
            hutchinson_diag(provider, &state.mean, state.t, step, &state.var, probes, rng)?
        }
        CovOption::MonteCarlo { samples } => {
            monte_carlo_cov(provider, &state.mean, state.t, step, &state.var, samples, rng)?
        }
    };
    let spread = if config.include_mean_spread_var && has_spread {
        mean_spread_var(provider, &state.mean, state.t, step, &state.var, config.spread_samples, rng)?
    } else {
        vec![0.0; n]
    };
    let mut floored = 0;
    let var = (0..n)
        .map(|i| {
            let v = state.var[i] + (velocity_var[i] + spread[i]) * dt * dt + 2.0 * dt * cov[i];
            if v < 0.0 {
                floored += 1;
                0.0
            } else {
                v
            }
        })
        .collect::<Vec<f64>>();
    if !var.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite(format!("propagated variance at t = {}", state.t)));
    }
    Ok(Propagated { var, floored })
}

pub fn propagate_variance<P: VelocityProvider + ?Sized, R: Rng + ?Sized>(
    state: &FlowState,
    provider: &P,
    step: usize,
    dt: f64,
    config: &UqConfig,
    rng: &mut R,
) -> Result<Propagated> {
    let vv = provider.velocity(&state.mean, state.t, step)?.var;
    propagate_variance_with(state, &vv, provider, step, dt, config, rng)
}

/// Mean of the `ceil(top_fraction * n)` largest entries.
pub fn aggregate_score(var: &[f64], top_fraction: f64) -> Result<f64> {
    if var.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty uncertainty map".into()));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("top fraction {top_fraction} outside (0, 1]")));
    }
    let mut v = var.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((top_fraction * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertainTrajectory {
    pub trajectory: Trajectory,
    pub floored: usize,
}

/// Sample the mean ODE and propagate the variance alongside it on the Euler
/// grid, using the velocity variance evaluated at each step's starting mean.
pub fn sample_with_uncertainty<P: VelocityProvider + ?Sized, R: Rng + ?Sized>(
    provider: &P,
    sampler: &SamplerConfig,
    config: &UqConfig,
    x0: &[f64],
    rng: &mut R,
) -> Result<UncertainTrajectory> {
    config.validate()?;
    let mut floored = 0;
    let steps = sampler.steps;
    let trajectory = integrate(provider, sampler, x0, |k, before, v, dt, after| {
        if k % config.cadence == 0 {
            let span = config.cadence.min(steps - k) as f64;
            let p = propagate_variance_with(before, &v.var, provider, k, span * dt, config, rng)?;
            floored += p.floored;
            after.var = p.var;
        }
        Ok(())
    })?;
    Ok(UncertainTrajectory { trajectory, floored })
}

/// Uncertainty from re-noising the recovered data estimate: at each
/// late-window step, recover `x1_hat`, draw `renoise` states on the path
/// through it, and take the element-wise variance of the predicted mean
/// velocity. The result is averaged over the window.
pub fn au_baseline_score<P: VelocityProvider + ?Sized, R: Rng + ?Sized>(
    provider: &P,
    trajectory: &Trajectory,
    path: &AffinePath,
    renoise: usize,
    late_fraction: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if renoise < 2 {
        return Err(Error::InvalidArgument("re-noise count must be >= 2".into()));
    }
    if !(late_fraction > 0.0 && late_fraction <= 1.0) {
        return Err(Error::InvalidArgument("late window fraction must lie in (0, 1]".into()));
    }
    let steps = trajectory.states.len().saturating_sub(1);
    if steps == 0 {
        return Err(Error::InvalidArgument("trajectory has no steps".into()));
    }
    let n = provider.dim();
    let start = steps - ((late_fraction * steps as f64).ceil() as usize).clamp(1, steps);
    let mut acc = vec![0.0; n];
    let mut used = 0usize;
    for k in start..steps {
        let s = &trajectory.states[k];
        let u = provider.velocity(&s.mean, s.t, k)?.mean;
        let x1 = match path.recover_x1(&s.mean, &u, s.t) {
            Ok(x1) => x1,
            Err(e @ Error::SingularTime { .. }) => {
                log::warn!("skipping AU step {k}: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut preds = Vec::with_capacity(renoise);
        for _ in 0..renoise {
            let x0 = standard_normal(n, rng);
            let xt = path.interpolate(&x1, &x0, s.t)?;
            preds.push(provider.velocity(&xt, s.t, k)?.mean);
        }
        for (j, a) in acc.iter_mut().enumerate() {
            *a += sample_variance(&preds.iter().map(|p| p[j]).collect::<Vec<_>>());
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::SingularTime { t: trajectory.last().t, what: "no usable AU step" });
    }
    Ok(acc.into_iter().map(|a| a / used as f64).collect())
}

/// One generated sample with its uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct UqSample {
    pub index: usize,
    pub x0: Vec<f64>,
    pub sample: Vec<f64>,
    pub var: Vec<f64>,
    pub score: f64,
    pub lambdas: Vec<Option<LambdaLog>>,
    pub floored: usize,
}

/// Generate `count` samples with per-sample seeds `seed ^ index`. The output
/// is identical for any execution mode or worker count.
pub fn generate<P: VelocityProvider + ?Sized>(
    provider: &P,
    sampler: &SamplerConfig,
    config: &UqConfig,
    count: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<UqSample>> {
    generate_with(|_| Ok(provider), sampler, config, count, seed, exec)
}

/// Like [`generate`], with a provider built per sample index (e.g. to cycle
/// class conditions).
pub fn generate_with<P, F>(
    make: F,
    sampler: &SamplerConfig,
    config: &UqConfig,
    count: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<UqSample>>
where
    P: VelocityProvider,
    F: Fn(usize) -> Result<P> + Sync + Send,
{
    exec.try_map(count, |i| {
        let provider = make(i)?;
        let mut rng = sample_rng(seed, i as u64);
        let x0 = standard_normal(provider.dim(), &mut rng);
        let ut = sample_with_uncertainty(&provider, sampler, config, &x0, &mut rng)?;
        let last = ut.trajectory.last();
        let score = aggregate_score(&last.var, config.top_fraction)?;
        Ok(UqSample {
            index: i,
            x0,
            sample: last.mean.clone(),
            var: last.var.clone(),
            score,
            lambdas: ut.trajectory.lambdas.clone(),
            floored: ut.floored,
        })
    })
}

/// Per-step Pearson correlation between conditional and unconditional sigma,
/// pooled over all samples and elements. `None` where no step was guided.
pub fn sigma_correlation_by_step(samples: &[UqSample]) -> Vec<Option<f64>> {
    let steps = samples.iter().map(|s| s.lambdas.len()).max().unwrap_or(0);
    (0..steps)
        .map(|k| {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for s in samples {
                if let Some(Some(l)) = s.lambdas.get(k) {
                    a.extend_from_slice(&l.sigma_cond);
                    b.extend_from_slice(&l.sigma_null);
                }
            }
            (a.len() >= 2).then(|| crate::stats::pearson(&a, &b))
        })
        .collect()
}

/// Per-step median of the applied guidance scale over samples.
pub fn lambda_median_by_step(samples: &[UqSample]) -> Vec<Option<f64>> {
    let steps = samples.iter().map(|s| s.lambdas.len()).max().unwrap_or(0);
    (0..steps)
        .map(|k| {
            let v: Vec<f64> = samples
                .iter()
                .filter_map(|s| s.lambdas.get(k).and_then(|l| l.as_ref()).map(|l| l.lambda_used))
                .collect();
            (!v.is_empty()).then(|| crate::stats::median(&v))
        })
        .collect()
}
