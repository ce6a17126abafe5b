//! Deterministic integration of the mean flow ODE on a uniform time grid.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{Cond, VelocityField};

/// Per-step record of the classifier-free guidance scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaLog {
    pub lambda_opt: f64,
    pub lambda_used: f64,
    /// Conditional and unconditional predicted standard deviations.
    pub sigma_cond: Vec<f64>,
    pub sigma_null: Vec<f64>,
}

/// What a velocity provider returns at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub lambda: Option<LambdaLog>,
}

/// Anything that can drive the sampler: a bare model or a guided wrapper.
pub trait VelocityProvider: Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &[f64], t: f64, step: usize) -> Result<Velocity>;

    /// Jacobian-vector product of the provided mean velocity.
    fn jvp(&self, x: &[f64], t: f64, step: usize, v: &[f64]) -> Result<Vec<f64>>;
}

impl<P: VelocityProvider + ?Sized> VelocityProvider for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, x: &[f64], t: f64, step: usize) -> Result<Velocity> {
        (**self).velocity(x, t, step)
    }

    fn jvp(&self, x: &[f64], t: f64, step: usize, v: &[f64]) -> Result<Vec<f64>> {
        (**self).jvp(x, t, step, v)
    }
}

/// Unguided model evaluation under a fixed condition.
pub struct Plain<'a, F: VelocityField + ?Sized> {
    pub field: &'a F,
    pub cond: Cond,
}

impl<'a, F: VelocityField + ?Sized> Plain<'a, F> {
    pub fn new(field: &'a F, cond: Cond) -> Self {
        Plain { field, cond }
    }
}

impl<F: VelocityField + ?Sized> VelocityProvider for Plain<'_, F> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, _step: usize) -> Result<Velocity> {
        let out = self.field.forward(x, t, self.cond)?;
        Ok(Velocity { mean: out.mean, var: out.var, lambda: None })
    }

    fn jvp(&self, x: &[f64], t: f64, _step: usize, v: &[f64]) -> Result<Vec<f64>> {
        self.field.jvp_mean(x, t, self.cond, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    #[default]
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub method: Method,
    /// Integration runs over `[eps, 1 - eps]`.
    pub eps: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, method: Method::Heun, eps: 1e-3 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.steps == 0 {
            errs.push("sample.steps must be >= 1".to_string());
        }
        if !(0.0..0.5).contains(&self.eps) {
            errs.push(format!("sample.eps must lie in [0, 0.5), got {}", self.eps));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn dt(&self) -> f64 {
        (1.0 - 2.0 * self.eps) / self.steps as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        if step == self.steps {
            1.0 - self.eps
        } else {
            self.eps + step as f64 * self.dt()
        }
    }
}

/// Mean and element-wise variance of the state at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl FlowState {
    pub fn new(t: f64, mean: Vec<f64>) -> Self {
        let var = vec![0.0; mean.len()];
        FlowState { t, mean, var }
    }
}

fn checked(v: Velocity, step: usize) -> Result<Velocity> {
    if v.mean.iter().chain(&v.var).all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::non_finite(format!("velocity at step {step}")))
    }
}

/// One explicit Euler step of the mean. Returns the advanced state and the
/// velocity evaluated at the starting point.
pub fn step_euler<P: VelocityProvider + ?Sized>(
    state: &FlowState,
    provider: &P,
    dt: f64,
    step: usize,
) -> Result<(FlowState, Velocity)> {
    let v = checked(provider.velocity(&state.mean, state.t, step)?, step)?;
    let mean = state.mean.iter().zip(&v.mean).map(|(x, u)| x + u * dt).collect();
    Ok((FlowState { t: state.t + dt, mean, var: state.var.clone() }, v))
}

/// Heun (explicit trapezoid) step: Euler predictor, averaged-slope corrector.
pub fn step_heun<P: VelocityProvider + ?Sized>(
    state: &FlowState,
    provider: &P,
    dt: f64,
    step: usize,
) -> Result<(FlowState, Velocity)> {
    let v1 = checked(provider.velocity(&state.mean, state.t, step)?, step)?;
    let pred: Vec<f64> = state.mean.iter().zip(&v1.mean).map(|(x, u)| x + u * dt).collect();
    let v2 = checked(provider.velocity(&pred, state.t + dt, step)?, step)?;
    let mean = state
        .mean
        .iter()
        .zip(v1.mean.iter().zip(&v2.mean))
        .map(|(x, (a, b))| x + 0.5 * dt * (a + b))
        .collect();
    Ok((FlowState { t: state.t + dt, mean, var: state.var.clone() }, v1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<FlowState>,
    /// Guidance scale log per step, when the provider reports one.
    pub lambdas: Vec<Option<LambdaLog>>,
}

impl Trajectory {
    pub fn last(&self) -> &FlowState {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// Integrate the mean ODE from `x0`, calling `on_step(step, before, velocity, dt, after)`
/// after each step so variance propagation can ride along.
pub fn integrate<P, H>(provider: &P, config: &SamplerConfig, x0: &[f64], mut on_step: H) -> Result<Trajectory>
where
    P: VelocityProvider + ?Sized,
    H: FnMut(usize, &FlowState, &Velocity, f64, &mut FlowState) -> Result<()>,
{
    config.validate()?;
    check_dim(provider.dim(), x0.len())?;
    let dt = config.dt();
    let mut states = Vec::with_capacity(config.steps + 1);
    let mut lambdas = Vec::with_capacity(config.steps);
    states.push(FlowState::new(config.time(0), x0.to_vec()));
    for k in 0..config.steps {
        let cur = states.last().expect("non-empty");
        let (mut next, v) = match config.method {
            Method::Euler => step_euler(cur, provider, dt, k)?,
            Method::Heun => step_heun(cur, provider, dt, k)?,
        };
        // pin the grid so accumulated rounding never leaves [eps, 1 - eps]
        next.t = config.time(k + 1);
        on_step(k, cur, &v, dt, &mut next)?;
        lambdas.push(v.lambda);
        states.push(next);
    }
    Ok(Trajectory { states, lambdas })
}

pub fn sample<P: VelocityProvider + ?Sized>(provider: &P, config: &SamplerConfig, x0: &[f64]) -> Result<Trajectory> {
    integrate(provider, config, x0, |_, _, _, _, _| Ok(()))
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = traj.states.first().map_or(0, |s| s.mean.len());
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((0..n).map(|i| format!("mean_{i}")));
    header.extend((0..n).map(|i| format!("var_{i}")));
    writeln!(f, "{}", header.join(","))?;
    for (k, s) in traj.states.iter().enumerate() {
        let cols: Vec<String> = s.mean.iter().chain(&s.var).map(|v| format!("{v:e}")).collect();
        writeln!(f, "{k},{:e},{}", s.t, cols.join(","))?;
    }
    f.flush()?;
    Ok(())
}
