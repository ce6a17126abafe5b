//! Seeded synthetic datasets. Gaussian mixtures double as oracles: under the
//! affine path with a standard normal base, the posterior over `x1` given
//! `x_t` is again a Gaussian mixture, so the marginal velocity and its
//! posterior variance are available in closed form.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::paths::AffinePath;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub mean: Vec<f64>,
    pub sigma: f64,
    /// Class of this mode in a labeled mixture; defaults to the mode index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

impl Mode {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Self {
        Mode { mean, sigma, class: None }
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class = Some(class);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyDataset {
    /// Equal-weight isotropic Gaussian mixture. With `labeled`, each mode is its own class.
    GaussianMixture { modes: Vec<Mode>, labeled: bool },
    TwoMoons { noise: f64, labeled: bool },
    /// Uniform over the dark squares of a `cells x cells` board on `[-2, 2]^2`.
    Checkerboard { cells: usize },
}

/// Points plus optional class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    pub points: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Points whose label equals `class`.
    pub fn of_class(&self, class: usize) -> Vec<Vec<f64>> {
        match &self.labels {
            Some(l) => self
                .points
                .iter()
                .zip(l)
                .filter(|(_, &c)| c == class)
                .map(|(p, _)| p.clone())
                .collect(),
            None => Vec::new(),
        }
    }
}

/// Posterior summary of the conditional velocity at one `(x_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityMoments {
    pub u: Vec<f64>,
    pub var_u: Vec<f64>,
}

impl ToyDataset {
    /// `count` modes evenly spaced on a circle.
    pub fn ring(count: usize, radius: f64, sigma: f64, labeled: bool) -> Self {
        let modes = (0..count)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / count as f64;
                Mode::new(vec![radius * a.cos(), radius * a.sin()], sigma)
            })
            .collect();
        ToyDataset::GaussianMixture { modes, labeled }
    }

    pub fn dim(&self) -> usize {
        match self {
            ToyDataset::GaussianMixture { modes, .. } => modes.first().map_or(0, |m| m.mean.len()),
            _ => 2,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ToyDataset::GaussianMixture { modes, labeled: true } => {
                modes.iter().enumerate().map(|(k, m)| m.class.unwrap_or(k) + 1).max().unwrap_or(0)
            }
            ToyDataset::TwoMoons { labeled: true, .. } => 2,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ToyDataset::GaussianMixture { modes, .. } => {
                if modes.is_empty() {
                    return Err(Error::InvalidArgument("mixture needs at least one mode".into()));
                }
                let n = modes[0].mean.len();
                if n == 0 {
                    return Err(Error::InvalidArgument("mode means must be non-empty".into()));
                }
                let explicit = modes.iter().filter(|m| m.class.is_some()).count();
                if explicit != 0 && explicit != modes.len() {
                    return Err(Error::InvalidArgument("either every mode or no mode carries a class".into()));
                }
                if explicit > 0 {
                    let k = modes.iter().filter_map(|m| m.class).max().unwrap_or(0) + 1;
                    if let Some(c) = (0..k).find(|c| !modes.iter().any(|m| m.class == Some(*c))) {
                        return Err(Error::InvalidArgument(format!("class {c} has no mode")));
                    }
                }
                for m in modes {
                    check_dim(n, m.mean.len())?;
                    if !(m.sigma > 0.0 && m.sigma.is_finite()) {
                        return Err(Error::InvalidArgument(format!("mode sigma {} must be > 0", m.sigma)));
                    }
                }
                Ok(())
            }
            ToyDataset::TwoMoons { noise, .. } if !(*noise >= 0.0) => {
                Err(Error::InvalidArgument("moon noise must be >= 0".into()))
            }
            ToyDataset::Checkerboard { cells } if *cells < 2 => {
                Err(Error::InvalidArgument("checkerboard needs at least 2 cells".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn modes(&self) -> Option<&[Mode]> {
        match self {
            ToyDataset::GaussianMixture { modes, .. } => Some(modes),
            _ => None,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Samples> {
        self.validate()?;
        if count == 0 {
            return Err(Error::InvalidArgument("draw count must be >= 1".into()));
        }
        let mut points = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let (p, l) = self.draw_one(rng);
            points.push(p);
            labels.push(l);
        }
        let labels = (self.num_classes() > 0).then_some(labels);
        Ok(Samples { points, labels })
    }

    /// Draws restricted to one class (rejection-free for mixtures and moons).
    pub fn draw_class<R: Rng + ?Sized>(&self, class: usize, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        if class >= self.num_classes() {
            return Err(Error::UnknownClass { id: class, classes: self.num_classes() });
        }
        Ok((0..count)
            .map(|_| match self {
                ToyDataset::GaussianMixture { modes, .. } => {
                    let own = self.class_modes(class);
                    gaussian(&modes[own[rng.random_range(0..own.len())]], rng)
                }
                ToyDataset::TwoMoons { noise, .. } => moon(class, *noise, rng),
                ToyDataset::Checkerboard { .. } => unreachable!("checkerboard is unlabeled"),
            })
            .collect())
    }

    fn draw_one<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        match self {
            ToyDataset::GaussianMixture { modes, .. } => {
                let k = rng.random_range(0..modes.len());
                (gaussian(&modes[k], rng), modes[k].class.unwrap_or(k))
            }
            ToyDataset::TwoMoons { noise, .. } => {
                let k = rng.random_range(0..2);
                (moon(k, *noise, rng), k)
            }
            ToyDataset::Checkerboard { cells } => {
                let c = *cells;
                let width = 4.0 / c as f64;
                loop {
                    let i = rng.random_range(0..c);
                    let j = rng.random_range(0..c);
                    if (i + j) % 2 == 0 {
                        let x = -2.0 + width * (i as f64 + rng.random::<f64>());
                        let y = -2.0 + width * (j as f64 + rng.random::<f64>());
                        return (vec![x, y], 0);
                    }
                }
            }
        }
    }

    /// Indices of the mixture modes that belong to `class`.
    pub fn class_modes(&self, class: usize) -> Vec<usize> {
        self.modes()
            .map(|modes| {
                (0..modes.len())
                    .filter(|&k| modes[k].class.unwrap_or(k) == class)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Index of the mode closest to `x` in Euclidean distance.
    pub fn nearest_mode(&self, x: &[f64]) -> Option<usize> {
        let modes = self.modes()?;
        modes
            .iter()
            .enumerate()
            .map(|(k, m)| (k, sq_dist(x, &m.mean)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }

    /// Exact posterior mean and element-wise variance of `u_t(x_t | x1)`
    /// for `x1` drawn from the mixture (or from one class when `class` is set).
    pub fn marginal_velocity(
        &self,
        path: &AffinePath,
        x_t: &[f64],
        t: f64,
        class: Option<usize>,
    ) -> Result<VelocityMoments> {
        let modes = self
            .modes()
            .ok_or_else(|| Error::InvalidArgument("velocity oracle needs a Gaussian mixture".into()))?;
        check_dim(self.dim(), x_t.len())?;
        let (a, c) = path.velocity_coeffs(t)?;
        let k = path.coeffs(t);
        let n = x_t.len() as f64;
        let selected: Vec<usize> = match class {
            Some(cl) => {
                let own = self.class_modes(cl);
                if own.is_empty() {
                    return Err(Error::UnknownClass { id: cl, classes: self.num_classes() });
                }
                own
            }
            None => (0..modes.len()).collect(),
        };
        // per-component posterior: weight, mean of x1, isotropic variance of x1
        let mut logw = Vec::with_capacity(selected.len());
        let mut means = Vec::with_capacity(selected.len());
        let mut vars = Vec::with_capacity(selected.len());
        for &i in &selected {
            let m = &modes[i];
            let s2 = m.sigma * m.sigma;
            let cv = k.alpha * k.alpha * s2 + k.beta * k.beta;
            let resid: Vec<f64> = x_t.iter().zip(&m.mean).map(|(x, mu)| x - k.alpha * mu).collect();
            let r2: f64 = resid.iter().map(|r| r * r).sum();
            logw.push(-0.5 * r2 / cv - 0.5 * n * cv.ln());
            let gain = k.alpha * s2 / cv;
            means.push(m.mean.iter().zip(&resid).map(|(mu, r)| mu + gain * r).collect::<Vec<f64>>());
            vars.push(s2 * k.beta * k.beta / cv);
        }
        let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        let d = x_t.len();
        let mut e1 = vec![0.0; d];
        let mut e2 = vec![0.0; d];
        for ((w, m), v) in w.iter().zip(&means).zip(&vars) {
            let p = w / z;
            for i in 0..d {
                e1[i] += p * m[i];
                e2[i] += p * (v + m[i] * m[i]);
            }
        }
        let u = (0..d).map(|i| a * e1[i] + c * x_t[i]).collect();
        let var_u = (0..d).map(|i| a * a * (e2[i] - e1[i] * e1[i]).max(0.0)).collect();
        Ok(VelocityMoments { u, var_u })
    }
}

fn gaussian<R: Rng + ?Sized>(m: &Mode, rng: &mut R) -> Vec<f64> {
    m.mean
        .iter()
        .map(|mu| mu + m.sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn moon<R: Rng + ?Sized>(which: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    let a = PI * rng.random::<f64>();
    let (x, y) = if which == 0 { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
    let nx: f64 = StandardNormal.sample(rng);
    let ny: f64 = StandardNormal.sample(rng);
    vec![x + noise * nx, y + noise * ny]
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Standard normal vector of length `n`.
pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const P: AffinePath = AffinePath::Linear;

    #[test]
    fn single_mode_sample_mean() {
        let d = ToyDataset::GaussianMixture {
            modes: vec![Mode::new(vec![0.0, 0.0], 1.0)],
            labeled: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = d.draw(100_000, &mut rng).unwrap();
        for i in 0..2 {
            let m: f64 = s.points.iter().map(|p| p[i]).sum::<f64>() / 1e5;
            assert!(m.abs() < 0.02, "{m}");
        }
        assert!(s.labels.is_none());
    }

    #[test]
    fn draw_is_deterministic() {
        let d = ToyDataset::ring(8, 4.0, 0.3, true);
        let a = d.draw(50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = d.draw(50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let m = ToyDataset::TwoMoons { noise: 0.1, labeled: true };
        assert_eq!(
            m.draw(20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(),
            m.draw(20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
        );
    }

    fn grouped() -> ToyDataset {
        let modes = (0..4).map(|k| Mode::new(vec![3.0 * k as f64, 0.0], 0.2).with_class(k % 2)).collect();
        ToyDataset::GaussianMixture { modes, labeled: true }
    }

    #[test]
    fn classes_may_span_several_modes() {
        let d = grouped();
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.class_modes(1), vec![1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = d.draw_class(1, 2000, &mut rng).unwrap();
        let near: Vec<usize> = pts.iter().map(|p| d.nearest_mode(p).unwrap()).collect();
        assert!(near.iter().all(|&k| k == 1 || k == 3));
        let ones = near.iter().filter(|&&k| k == 1).count();
        assert!((800..1200).contains(&ones), "{ones}");
        let s = d.draw(500, &mut rng).unwrap();
        for (p, l) in s.points.iter().zip(s.labels.unwrap()) {
            assert_eq!(d.nearest_mode(p).unwrap() % 2, l);
        }
        assert!(matches!(d.draw_class(2, 1, &mut rng), Err(Error::UnknownClass { .. })));
    }

    #[test]
    fn class_oracle_restricts_to_the_class_modes() {
        let d = grouped();
        let p = AffinePath::Linear;
        // halfway between modes 1 and 2: class 1 only sees modes 1 and 3
        let x = [4.5 * 0.7, 0.0];
        let full = d.marginal_velocity(&p, &x, 0.7, None).unwrap();
        let c1 = d.marginal_velocity(&p, &x, 0.7, Some(1)).unwrap();
        let only13 = ToyDataset::GaussianMixture {
            modes: vec![Mode::new(vec![3.0, 0.0], 0.2), Mode::new(vec![9.0, 0.0], 0.2)],
            labeled: false,
        };
        let r = only13.marginal_velocity(&p, &x, 0.7, None).unwrap();
        assert_eq!(c1.u, r.u);
        assert_eq!(c1.var_u, r.var_u);
        assert!(c1.u != full.u);
    }

    #[test]
    fn partial_class_assignment_rejected() {
        let modes = vec![Mode::new(vec![0.0], 1.0).with_class(0), Mode::new(vec![1.0], 1.0)];
        assert!(ToyDataset::GaussianMixture { modes, labeled: true }.validate().is_err());
        let modes = vec![Mode::new(vec![0.0], 1.0).with_class(0), Mode::new(vec![1.0], 1.0).with_class(2)];
        assert!(ToyDataset::GaussianMixture { modes, labeled: true }.validate().is_err());
    }

    #[test]
    fn ring_labels_match_nearest_mode() {
        // separation between adjacent modes = 8 sigma
        let sigma = 0.5;
        let radius = 8.0 * sigma / (2.0 * (PI / 8.0).sin());
        let d = ToyDataset::ring(8, radius, sigma, true);
        let s = d.draw(20_000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let labels = s.labels.as_ref().unwrap();
        let wrong = s
            .points
            .iter()
            .zip(labels)
            .filter(|(p, &l)| d.nearest_mode(p) != Some(l))
            .count();
        assert!((wrong as f64) / 20_000.0 < 1e-3, "{wrong}");
    }

    #[test]
    fn checkerboard_stays_on_dark_cells() {
        let d = ToyDataset::Checkerboard { cells: 4 };
        let s = d.draw(2000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for p in &s.points {
            let i = ((p[0] + 2.0) / 1.0).floor() as usize;
            let j = ((p[1] + 2.0) / 1.0).floor() as usize;
            assert_eq!((i + j) % 2, 0);
        }
    }

    #[test]
    fn invalid_datasets() {
        let d = ToyDataset::GaussianMixture { modes: vec![Mode::new(vec![0.0], 0.0)], labeled: false };
        assert!(d.validate().is_err());
        assert!(ToyDataset::Checkerboard { cells: 1 }.validate().is_err());
        assert!(ToyDataset::ring(2, 1.0, 0.1, false).draw(0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn single_gaussian_closed_form() {
        // x1 ~ N(mu, s^2 I), x0 ~ N(0, I): x_t ~ N(t mu, (t^2 s^2 + (1-t)^2) I) and
        // E[x1 | x_t] = mu + t s^2 (x_t - t mu) / c.
        let mu = [1.5, -0.5];
        let s: f64 = 0.7;
        let d = ToyDataset::GaussianMixture { modes: vec![Mode::new(mu.to_vec(), s)], labeled: false };
        for &(t, x) in &[(0.3, [0.2, 0.9]), (0.8, [-1.0, 2.0]), (0.05, [0.0, 0.0])] {
            let c = t * t * s * s + (1.0 - t) * (1.0 - t);
            let out = d.marginal_velocity(&P, &x, t, None).unwrap();
            for i in 0..2 {
                let ex1 = mu[i] + t * s * s * (x[i] - t * mu[i]) / c;
                let u = (ex1 - x[i]) / (1.0 - t);
                assert!((out.u[i] - u).abs() < 1e-10);
                let v = s * s / c;
                assert!((out.var_u[i] - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn symmetric_pair_has_zero_velocity_at_origin() {
        let d = ToyDataset::GaussianMixture {
            modes: vec![
                Mode::new(vec![3.0, 0.0], 0.4),
                Mode::new(vec![-3.0, 0.0], 0.4),
            ],
            labeled: false,
        };
        let out = d.marginal_velocity(&P, &[0.0, 0.0], 0.6, None).unwrap();
        assert!(out.u[0].abs() < 1e-12 && out.u[1].abs() < 1e-12);
        let at_mode = d.marginal_velocity(&P, &[0.6 * 3.0, 0.0], 0.6, None).unwrap();
        assert!(out.var_u[0] > at_mode.var_u[0]);
        assert!(d.marginal_velocity(&P, &[0.0, 0.0], 1.0, None).is_err());
    }

    #[test]
    fn oracle_agrees_with_monte_carlo() {
        // Draw (x1, x0) pairs, keep the importance weight p(x_t | x1) of each x1
        // and compare self-normalized moments with the closed form.
        let d = ToyDataset::ring(4, 2.0, 0.5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for probe in 0..20 {
            let t = 0.2 + 0.6 * rng.random::<f64>();
            let x_t = [3.0 * rng.random::<f64>() - 1.5, 3.0 * rng.random::<f64>() - 1.5];
            let exact = d.marginal_velocity(&P, &x_t, t, None).unwrap();
            let xs = d.draw(1_000_000, &mut rng).unwrap().points;
            let beta = 1.0 - t;
            let mut w = Vec::with_capacity(xs.len());
            let mut us = Vec::with_capacity(xs.len());
            for x1 in &xs {
                let r2 = sq_dist(&x_t, &[t * x1[0], t * x1[1]]);
                w.push((-0.5 * r2 / (beta * beta)).exp());
                us.push(P.cond_velocity(&x_t, x1, t).unwrap());
            }
            let z: f64 = w.iter().sum();
            let ess = z * z / w.iter().map(|w| w * w).sum::<f64>();
            for i in 0..2 {
                let m: f64 = w.iter().zip(&us).map(|(w, u)| w * u[i]).sum::<f64>() / z;
                let v: f64 = w.iter().zip(&us).map(|(w, u)| w * (u[i] - m).powi(2)).sum::<f64>() / z;
                let se = (v / ess).sqrt();
                assert!((m - exact.u[i]).abs() < 3.0 * se + 1e-9, "probe {probe} dim {i}: {m} vs {} (se {se})", exact.u[i]);
            }
        }
    }
}
