//! Affine probability paths `x_t = alpha_t * x1 + beta_t * x0`.
//!
//! Time runs from 0 (base noise) to 1 (data).

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Schedule coefficients and their time derivatives at a single `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub beta: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinePath {
    /// Rectified-flow path: `alpha_t = t`, `beta_t = 1 - t`.
    #[default]
    Linear,
}

impl AffinePath {
    pub fn coeffs(&self, t: f64) -> Coeffs {
        match self {
            AffinePath::Linear => Coeffs {
                alpha: t,
                beta: 1.0 - t,
                d_alpha: 1.0,
                d_beta: -1.0,
            },
        }
    }

    pub fn interpolate(&self, x1: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x1.len(), x0.len())?;
        let c = self.coeffs(t);
        Ok(x1
            .iter()
            .zip(x0)
            .map(|(a, b)| c.alpha * a + c.beta * b)
            .collect())
    }

    /// Velocity of the interpolant through `x_t` that ends at `x1`.
    ///
    /// Eliminating `x0 = (x_t - alpha x1) / beta` from `d_alpha x1 + d_beta x0`
    /// gives `a x1 + c x_t` with the coefficients from [`Self::velocity_coeffs`].
    pub fn cond_velocity(&self, x_t: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x_t.len(), x1.len())?;
        let (a, c) = self.velocity_coeffs(t)?;
        Ok(x1.iter().zip(x_t).map(|(x1, xt)| a * x1 + c * xt).collect())
    }

    /// `(a, c)` such that `u_t(x_t | x1) = a * x1 + c * x_t`.
    pub fn velocity_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        let k = self.coeffs(t);
        if k.beta == 0.0 {
            return Err(Error::SingularTime {
                t,
                what: "conditional velocity needs beta_t > 0",
            });
        }
        let a = (k.d_alpha * k.beta - k.d_beta * k.alpha) / k.beta;
        let c = k.d_beta / k.beta;
        Ok((a, c))
    }

    /// Classifier-guidance coefficient `b_t`.
    pub fn cg_coefficient(&self, t: f64) -> Result<f64> {
        let k = self.coeffs(t);
        if k.alpha == 0.0 {
            return Err(Error::SingularTime {
                t,
                what: "guidance coefficient needs alpha_t != 0",
            });
        }
        Ok(-(k.d_beta * k.beta * k.alpha - k.d_alpha * k.beta * k.beta) / k.alpha)
    }

    /// Clean-data estimate implied by a velocity `u` at state `x_t`.
    pub fn recover_x1(&self, x_t: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x_t.len(), u.len())?;
        let k = self.coeffs(t);
        let den = k.d_alpha * k.beta - k.d_beta * k.alpha;
        if den == 0.0 {
            return Err(Error::SingularTime {
                t,
                what: "data recovery denominator vanishes",
            });
        }
        Ok(x_t
            .iter()
            .zip(u)
            .map(|(x, u)| (-k.d_beta * x + k.beta * u) / den)
            .collect())
    }
}
