//! Cluster purity and effect-size statistics: variance reduction per parameter, the
//! threshold profile over clusters, and the Vargha–Delaney Â12 effect size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthlab::dataset::Manifest;

/// Population variance (divides by `n`).
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn param_values(members: &[String], manifest: &Manifest, param: &str) -> Result<Vec<f64>> {
    let index = manifest.index();
    members
        .iter()
        .map(|id| {
            let row = index
                .get(id.as_str())
                .ok_or_else(|| Error::NotFound(format!("image {id} in the manifest")))?;
            row.params
                .get(param)
                .ok_or_else(|| Error::NotFound(format!("parameter {param}")))
        })
        .collect()
}

/// `RR = 1 - var(p over cluster) / var(p over all clustered images)` for every cluster.
/// Returns `None` when `p` is constant over the whole error-inducing set.
pub fn variance_reduction(clusters: &[Vec<String>], manifest: &Manifest, param: &str) -> Result<Option<Vec<f64>>> {
    let all: Vec<String> = clusters.iter().flatten().cloned().collect();
    if all.is_empty() {
        return Err(Error::invalid("no clustered images"));
    }
    let total = population_variance(&param_values(&all, manifest, param)?);
    if total <= 0.0 {
        return Ok(None);
    }
    clusters
        .iter()
        .map(|c| Ok(1.0 - population_variance(&param_values(c, manifest, param)?) / total))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// RR of every cluster (rows) for every parameter (columns); `None` marks a parameter that is
/// constant over the error-inducing set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrTable {
    pub params: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl RrTable {
    pub fn compute(clusters: &[Vec<String>], manifest: &Manifest, params: &[&str]) -> Result<Self> {
        let mut values = vec![vec![None; params.len()]; clusters.len()];
        for (j, p) in params.iter().enumerate() {
            if let Some(rr) = variance_reduction(clusters, manifest, p)? {
                for (row, v) in values.iter_mut().zip(rr) {
                    row[j] = Some(v);
                }
            }
        }
        Ok(Self {
            params: params.iter().map(|s| s.to_string()).collect(),
            values,
        })
    }

    /// Largest RR of each cluster over the applicable parameters.
    pub fn best(&self) -> Vec<Option<f64>> {
        self.values
            .iter()
            .map(|row| row.iter().flatten().copied().reduce(f64::max))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub percent: f64,
}

pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// Percentage of clusters with at least one parameter at or above each threshold. The `0.0`
/// threshold counts strictly positive reductions only.
pub fn threshold_profile(table: &RrTable, thresholds: &[f64]) -> Vec<ThresholdPoint> {
    let best = table.best();
    let n = best.len();
    thresholds
        .iter()
        .map(|&t| {
            let hits = best
                .iter()
                .filter(|b| match b {
                    Some(v) if t == 0.0 => *v > 0.0,
                    Some(v) => *v >= t,
                    None => false,
                })
                .count();
            ThresholdPoint {
                threshold: t,
                percent: if n == 0 { 0.0 } else { 100.0 * hits as f64 / n as f64 },
            }
        })
        .collect()
}

/// Vargha–Delaney `Â12 = P(A > B) + 0.5 P(A = B)`, computed from the rank sum of `a` in the
/// pooled sample (mid-ranks for ties).
pub fn vargha_delaney(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("both samples must be nonempty"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::invalid("samples must not contain NaN"));
    }
    let mut pooled: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (m, n) = (a.len() as f64, b.len() as f64);
    Ok((rank_sum / m - (m + 1.0) / 2.0) / n)
}
