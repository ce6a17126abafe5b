//! Uncertainty-aware guidance, applied as decorators over a velocity field.
//!
//! Classifier-free guidance picks the extrapolation scale per step so the
//! predicted variance of the extrapolated velocity is minimal (capped at
//! `lambda_max`); classifier-style guidance nudges the mean along the
//! gradient of a pseudo-likelihood that favours low predicted variance.
//! When both are enabled, the CFG combination runs first and the gradient
//! correction acts on its output.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{Cond, ModelOutput, VelocityField};
use crate::paths::AffinePath;
use crate::sample::{LambdaLog, Velocity, VelocityProvider};

/// Lower bound applied to the extrapolated variance.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub w: f64,
    pub cg_cadence: usize,
    pub lambda_max: f64,
    pub cfg_enabled: bool,
    pub cg_enabled: bool,
    /// Plain CFG with a constant scale instead of the adaptive one.
    pub fixed_lambda: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            w: 0.0,
            cg_cadence: 2,
            lambda_max: 0.0,
            cfg_enabled: false,
            cg_enabled: false,
            fixed_lambda: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.w >= 0.0) {
            errs.push(format!("guidance.w must be >= 0, got {}", self.w));
        }
        if !(self.lambda_max >= 0.0) {
            errs.push(format!("guidance.lambda_max must be >= 0, got {}", self.lambda_max));
        }
        if self.cg_cadence == 0 {
            errs.push("guidance.cg_cadence must be >= 1".to_string());
        }
        if let Some(l) = self.fixed_lambda {
            if !(l >= 0.0) {
                errs.push(format!("guidance.fixed_lambda must be >= 0, got {l}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedOutput {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub lambda_used: Option<f64>,
}

/// `f(var) = -(mean(var))^2`.
pub fn pseudo_likelihood_f(var: &[f64]) -> f64 {
    let m = var.iter().sum::<f64>() / var.len() as f64;
    -(m * m)
}

/// `∂f/∂var_i = -2 mean(var) / n`.
pub fn pseudo_likelihood_grad(var: &[f64]) -> Vec<f64> {
    let n = var.len() as f64;
    let m = var.iter().sum::<f64>() / n;
    vec![-2.0 * m / n; var.len()]
}

/// Non-negative minimizer of `||sigma_y + lambda (sigma_y - sigma_null)||^2`.
pub fn lambda_opt(sigma_y: &[f64], sigma_null: &[f64]) -> f64 {
    let mut dd = 0.0;
    let mut ds = 0.0;
    for (y, n) in sigma_y.iter().zip(sigma_null) {
        let d = y - n;
        dd += d * d;
        ds += d * y;
    }
    if dd == 0.0 {
        return 0.0;
    }
    (-ds / dd).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    Adaptive { lambda_max: f64 },
    Fixed(f64),
}

/// Conditional/unconditional evaluation plus the combined prediction.
struct CfgParts {
    out_y: ModelOutput,
    sigma_y: Vec<f64>,
    sigma_null: Vec<f64>,
    lambda_opt: f64,
    lambda: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn cfg_parts<F: VelocityField + ?Sized>(field: &F, x: &[f64], t: f64, class: usize, rule: LambdaRule) -> Result<CfgParts> {
    let out_y = field.forward(x, t, Cond::Class(class))?;
    let out_n = field.forward(x, t, Cond::Null)?;
    let sigma_y = out_y.sigma();
    let sigma_null = out_n.sigma();
    let lo = lambda_opt(&sigma_y, &sigma_null);
    let lambda = match rule {
        LambdaRule::Adaptive { lambda_max } => lo.min(lambda_max),
        LambdaRule::Fixed(l) => l,
    };
    let (mean, var) = if lambda == 0.0 {
        (out_y.mean.clone(), out_y.var.clone())
    } else {
        let mean = out_y
            .mean
            .iter()
            .zip(&out_n.mean)
            .map(|(y, n)| (1.0 + lambda) * y - lambda * n)
            .collect();
        let var = sigma_y
            .iter()
            .zip(&sigma_null)
            .map(|(y, n)| ((1.0 + lambda) * y - lambda * n).powi(2).max(VAR_FLOOR))
            .collect();
        (mean, var)
    };
    Ok(CfgParts { out_y, sigma_y, sigma_null, lambda_opt: lo, lambda, mean, var })
}

/// Adaptive classifier-free combination for class `class`.
pub fn ucfg_combine<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    class: usize,
    lambda_max: f64,
) -> Result<GuidedOutput> {
    let p = cfg_parts(field, x, t, class, LambdaRule::Adaptive { lambda_max })?;
    Ok(GuidedOutput { mean: p.mean, var: p.var, lambda_used: Some(p.lambda) })
}

/// Gradient-of-pseudo-likelihood correction on an unextrapolated prediction:
/// `mean + b_t w ∇_x f(var(x))`.
pub fn ucg_correct<F: VelocityField + ?Sized>(
    mean: &[f64],
    x: &[f64],
    t: f64,
    field: &F,
    cond: Cond,
    path: &AffinePath,
    w: f64,
) -> Result<Vec<f64>> {
    check_dim(x.len(), mean.len())?;
    if w == 0.0 {
        return Ok(mean.to_vec());
    }
    let b = path.cg_coefficient(t)?;
    let var = field.forward(x, t, cond)?.var;
    let grad = field.var_vjp(x, t, cond, &pseudo_likelihood_grad(&var))?;
    Ok(mean.iter().zip(&grad).map(|(m, g)| m + b * w * g).collect())
}

/// Velocity provider applying U-CFG and/or U-CG on top of a field.
pub struct Guided<'a, F: VelocityField + ?Sized> {
    pub field: &'a F,
    pub cond: Cond,
    pub path: AffinePath,
    pub config: GuidanceConfig,
}

impl<'a, F: VelocityField + ?Sized> Guided<'a, F> {
    pub fn new(field: &'a F, cond: Cond, config: GuidanceConfig) -> Result<Self> {
        config.validate()?;
        if config.cfg_enabled && field.num_classes() == 0 {
            return Err(Error::InvalidArgument(
                "classifier-free guidance needs a class-conditional model".into(),
            ));
        }
        if let Cond::Class(c) = cond {
            if c >= field.num_classes() {
                return Err(Error::UnknownClass { id: c, classes: field.num_classes() });
            }
        }
        Ok(Guided { field, cond, path: AffinePath::Linear, config })
    }

    fn rule(&self) -> LambdaRule {
        match self.config.fixed_lambda {
            Some(l) => LambdaRule::Fixed(l),
            None => LambdaRule::Adaptive { lambda_max: self.config.lambda_max },
        }
    }

    fn cfg_class(&self) -> Option<usize> {
        match self.cond {
            Cond::Class(c) if self.config.cfg_enabled => Some(c),
            _ => None,
        }
    }

    fn cg_active(&self, step: usize) -> bool {
        self.config.cg_enabled && self.config.w > 0.0 && step % self.config.cg_cadence == 0
    }
}

impl<F: VelocityField + ?Sized> VelocityProvider for Guided<'_, F> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, step: usize) -> Result<Velocity> {
        let mut lambda = None;
        let (mut mean, var, grad) = match self.cfg_class() {
            Some(class) => {
                let p = cfg_parts(self.field, x, t, class, self.rule())?;
                let grad = if self.cg_active(step) {
                    // chain rule through ((1+λ)σ_y - λσ_∅)^2 with λ held fixed
                    let df = pseudo_likelihood_grad(&p.var);
                    let l = p.lambda;
                    let mut cot_y = vec![0.0; x.len()];
                    let mut cot_n = vec![0.0; x.len()];
                    for i in 0..x.len() {
                        let s = (1.0 + l) * p.sigma_y[i] - l * p.sigma_null[i];
                        if l == 0.0 {
                            cot_y[i] = df[i];
                        } else if s * s > VAR_FLOOR {
                            cot_y[i] = df[i] * s * (1.0 + l) / p.sigma_y[i];
                            cot_n[i] = -df[i] * s * l / p.sigma_null[i];
                        }
                    }
                    let mut g = self.field.var_vjp(x, t, Cond::Class(class), &cot_y)?;
                    if l != 0.0 {
                        let gn = self.field.var_vjp(x, t, Cond::Null, &cot_n)?;
                        g.iter_mut().zip(&gn).for_each(|(a, b)| *a += b);
                    }
                    Some(g)
                } else {
                    None
                };
                lambda = Some(LambdaLog {
                    lambda_opt: p.lambda_opt,
                    lambda_used: p.lambda,
                    sigma_cond: p.sigma_y,
                    sigma_null: p.sigma_null,
                });
                let _ = p.out_y;
                (p.mean, p.var, grad)
            }
            None => {
                let out = self.field.forward(x, t, self.cond)?;
                let grad = if self.cg_active(step) {
                    Some(self.field.var_vjp(x, t, self.cond, &pseudo_likelihood_grad(&out.var))?)
                } else {
                    None
                };
                (out.mean, out.var, grad)
            }
        };
        if let Some(g) = grad {
            match self.path.cg_coefficient(t) {
                Ok(b) => {
                    let k = b * self.config.w;
                    mean.iter_mut().zip(&g).for_each(|(m, g)| *m += k * g);
                }
                Err(Error::SingularTime { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(Velocity { mean, var, lambda })
    }

    fn jvp(&self, x: &[f64], t: f64, step: usize, v: &[f64]) -> Result<Vec<f64>> {
        // the guidance-gradient term is second order in the model and is left out
        let _ = step;
        match self.cfg_class() {
            Some(class) => {
                let p = cfg_parts(self.field, x, t, class, self.rule())?;
                let jy = self.field.jvp_mean(x, t, Cond::Class(class), v)?;
                if p.lambda == 0.0 {
                    return Ok(jy);
                }
                let jn = self.field.jvp_mean(x, t, Cond::Null, v)?;
                Ok(jy.iter().zip(&jn).map(|(a, b)| (1.0 + p.lambda) * a - p.lambda * b).collect())
            }
            None => self.field.jvp_mean(x, t, self.cond, v),
        }
    }
}
