//! Sample-quality metrics and the uncertainty filter sweep.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::sq_dist;
use crate::error::{Error, Result};
use crate::par::Execution;

pub const DEFAULT_K: usize = 5;

/// A generated sample and its aggregate uncertainty score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub sample: Vec<f64>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ratio: f64,
    pub precision: f64,
    pub recall: f64,
    pub energy_distance: f64,
    pub retained: usize,
}

fn check_points(points: &[Vec<f64>], k: usize, what: &str) -> Result<usize> {
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("{what} set")));
    }
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    if sorted.len() < k + 1 {
        return Err(Error::InsufficientSamples { needed: k + 1, have: sorted.len() });
    }
    Ok(dim)
}

/// Squared distance from each point to its k-th nearest neighbour in the set.
pub fn knn_radii_sq(points: &[Vec<f64>], k: usize, exec: Execution) -> Vec<f64> {
    exec.map(points.len(), |i| {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| sq_dist(&points[i], q))
            .collect();
        let (_, kth, _) = d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        *kth
    })
}

fn coverage(queries: &[Vec<f64>], support: &[Vec<f64>], radii_sq: &[f64], exec: Execution) -> f64 {
    let hits = exec.map(queries.len(), |i| {
        support.iter().zip(radii_sq).any(|(s, &r)| sq_dist(&queries[i], s) <= r)
    });
    hits.iter().filter(|&&h| h).count() as f64 / queries.len() as f64
}

/// k-NN manifold precision and recall of `generated` against `real`.
pub fn knn_precision_recall(
    real: &[Vec<f64>],
    generated: &[Vec<f64>],
    k: usize,
    exec: Execution,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let dr = check_points(real, k, "real")?;
    let dg = check_points(generated, k, "generated")?;
    if dr != dg {
        return Err(Error::DimensionMismatch { expected: dr, got: dg });
    }
    let rr = knn_radii_sq(real, k, exec);
    let rg = knn_radii_sq(generated, k, exec);
    Ok((coverage(generated, real, &rr, exec), coverage(real, generated, &rg, exec)))
}

fn mean_pairwise(a: &[Vec<f64>], b: &[Vec<f64>], exec: Execution) -> f64 {
    let rows = exec.map(a.len(), |i| b.iter().map(|y| sq_dist(&a[i], y).sqrt()).sum::<f64>());
    rows.iter().sum::<f64>() / (a.len() * b.len()) as f64
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` (V-statistic).
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>], exec: Execution) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, have: 0 });
    }
    let dx = check_points(x, 0, "first")?;
    let dy = check_points(y, 0, "second")?;
    if dx != dy {
        return Err(Error::DimensionMismatch { expected: dx, got: dy });
    }
    Ok(2.0 * mean_pairwise(x, y, exec) - mean_pairwise(x, x, exec) - mean_pairwise(y, y, exec))
}

/// Indices ordered by score descending, ties by index ascending.
pub fn rank_by_score(records: &[SampleRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .score
            .total_cmp(&records[a].score)
            .then(records[a].index.cmp(&records[b].index))
    });
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub eval_size: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], eval_size: 500, k: DEFAULT_K, seed: 0 }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.ratios.is_empty() {
            errs.push("eval.ratios must not be empty".to_string());
        }
        for r in &self.ratios {
            if !(0.0..1.0).contains(r) {
                errs.push(format!("eval.ratios entries must be in [0, 1), got {r}"));
            }
        }
        if self.eval_size == 0 {
            errs.push("eval.eval_size must be >= 1".to_string());
        }
        if self.k == 0 {
            errs.push("eval.k must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Drop the highest-scoring fraction of samples for each ratio, subsample the
/// rest to a fixed size and compute metrics against `real`.
pub fn filter_sweep(
    records: &[SampleRecord],
    real: &[Vec<f64>],
    config: &SweepConfig,
    exec: Execution,
) -> Result<Vec<EvalReport>> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InsufficientSamples { needed: config.eval_size, have: 0 });
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::non_finite(format!("score of sample {}", r.index)));
    }
    let order = rank_by_score(records);
    let mut out = Vec::with_capacity(config.ratios.len());
    for &ratio in &config.ratios {
        let drop = (ratio * records.len() as f64).round() as usize;
        let kept = &order[drop.min(order.len())..];
        if kept.len() < config.eval_size {
            return Err(Error::InsufficientSamples { needed: config.eval_size, have: kept.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pick = sample_indices(&mut rng, kept.len(), config.eval_size).into_vec();
        pick.sort_unstable();
        let points: Vec<Vec<f64>> = pick.iter().map(|&i| records[kept[i]].sample.clone()).collect();
        let (precision, recall) = knn_precision_recall(real, &points, config.k, exec)?;
        let energy = energy_distance(&points, real, exec)?;
        out.push(EvalReport { ratio, precision, recall, energy_distance: energy, retained: kept.len() });
    }
    Ok(out)
}

pub fn write_report_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ratio,precision,recall,energy_distance,retained")?;
    for r in reports {
        writeln!(f, "{},{},{},{},{}", r.ratio, r.precision, r.recall, r.energy_distance, r.retained)?;
    }
    f.flush()?;
    Ok(())
}
