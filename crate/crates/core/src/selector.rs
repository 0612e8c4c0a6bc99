//! Unsafe-set selection: per-cluster quotas, single-linkage cluster ranking of improvement
//! images and the rank sweep that fills the quotas.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::RootCauseClusters;
use crate::error::{Error, Result};
use crate::heatmap::RectDistanceMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Selection factor in `[0, 1]`.
    pub sf: f64,
    /// Number of images in the test set the clusters were derived from.
    pub test_size: usize,
    /// Accuracy of the model on that test set, in `[0, 1]`.
    pub test_accuracy: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            sf: 0.3,
            test_size: 0,
            test_accuracy: 0.0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sf) {
            return Err(Error::invalid(format!("selection factor {} outside [0, 1]", self.sf)));
        }
        if !(0.0..=1.0).contains(&self.test_accuracy) {
            return Err(Error::invalid(format!("test accuracy {} outside [0, 1]", self.test_accuracy)));
        }
        if self.test_size == 0 {
            return Err(Error::invalid("test set size must be positive"));
        }
        Ok(())
    }

    /// `test_size * sf * (1 - test_accuracy)`.
    pub fn budget(&self) -> f64 {
        self.test_size as f64 * self.sf * (1.0 - self.test_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quotas {
    pub raw: Vec<f64>,
    pub rounded: Vec<usize>,
}

impl Quotas {
    pub fn total(&self) -> usize {
        self.rounded.iter().sum()
    }
}

/// `U_i = budget * |C_i| / |C|`, rounded by flooring every quota and handing the units still
/// missing to reach `round(sum U_i)` to the largest fractional parts (lower cluster first on
/// ties).
pub fn cluster_quotas(config: &SelectionConfig, sizes: &[usize]) -> Result<Quotas> {
    config.validate()?;
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || total == 0 {
        return Err(Error::invalid("quotas need at least one nonempty cluster"));
    }
    if config.test_accuracy == 1.0 {
        log::warn!("test accuracy is 1: no errors to target, every quota is 0");
    }
    let budget = config.budget();
    let raw: Vec<f64> = sizes.iter().map(|&s| budget * s as f64 / total as f64).collect();
    let mut rounded: Vec<usize> = raw.iter().map(|q| q.floor() as usize).collect();
    let target = raw.iter().sum::<f64>().round() as usize;
    let missing = target.saturating_sub(rounded.iter().sum());
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().take(missing) {
        rounded[c] += 1;
    }
    Ok(Quotas { raw, rounded })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub cluster: usize,
    pub distance: f64,
}

/// For every improvement image, all clusters ordered from closest (rank 1) to furthest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub ids: Vec<String>,
    pub ranks: Vec<Vec<RankEntry>>,
}

/// Single-linkage distance of every improvement image (matrix row) to every cluster: the
/// minimum over the cluster's member columns.
pub fn rank_clusters(dm: &RectDistanceMatrix, clusters: &RootCauseClusters) -> Result<RankTable> {
    rank_members(dm, &clusters.members)
}

/// [`rank_clusters`] for clusters given as member id lists.
pub fn rank_members(dm: &RectDistanceMatrix, members: &[Vec<String>]) -> Result<RankTable> {
    let index: std::collections::HashMap<&str, usize> =
        dm.col_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut columns = Vec::with_capacity(members.len());
    for (c, members) in members.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::invalid(format!("cluster {c} is empty")));
        }
        let cols = members
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::NotFound(format!("cluster member {id} in the distance matrix")))
            })
            .collect::<Result<Vec<_>>>()?;
        columns.push(cols);
    }
    let ranks = (0..dm.rows())
        .into_par_iter()
        .map(|r| {
            let row = dm.row(r);
            let mut entries: Vec<RankEntry> = columns
                .iter()
                .enumerate()
                .map(|(cluster, cols)| RankEntry {
                    cluster,
                    distance: cols.iter().map(|&c| row[c]).fold(f64::INFINITY, f64::min),
                })
                .collect();
            entries.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.cluster.cmp(&b.cluster)));
            entries
        })
        .collect();
    Ok(RankTable {
        ids: dm.row_ids.clone(),
        ranks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub id: String,
    pub cluster: usize,
    /// 1-based rank of `cluster` for this image.
    pub rank: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsafeSet {
    pub quotas: Vec<usize>,
    /// Selected images per cluster, in selection order.
    pub selected: Vec<Vec<Selection>>,
}

impl UnsafeSet {
    pub fn total(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }

    /// Units of quota left unfilled per cluster.
    pub fn shortfall(&self) -> Vec<usize> {
        self.quotas
            .iter()
            .zip(&self.selected)
            .map(|(q, s)| q - s.len())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.selected.iter().map(Vec::len).collect()
    }

    /// All selections in cluster order.
    pub fn iter(&self) -> impl Iterator<Item = &Selection> {
        self.selected.iter().flatten()
    }
}

/// Sweeps ranks 1..=k. At each rank the still unassigned images are visited by increasing
/// distance to their cluster of that rank (lower image index on ties) and assigned to it when
/// the cluster is below quota.
pub fn assign_unsafe(ranks: &RankTable, quotas: &[usize]) -> Result<UnsafeSet> {
    let k = quotas.len();
    if let Some((i, _)) = ranks.ranks.iter().enumerate().find(|(_, r)| r.len() != k) {
        return Err(Error::DimensionMismatch(format!(
            "image {} ranks {} clusters, {k} quotas given",
            ranks.ids[i],
            ranks.ranks[i].len()
        )));
    }
    let mut selected: Vec<Vec<Selection>> = vec![Vec::new(); k];
    let mut assigned = vec![false; ranks.ids.len()];
    let mut open: usize = quotas.iter().filter(|&&q| q > 0).count();
    for r in 0..k {
        if open == 0 {
            break;
        }
        let mut order: Vec<usize> = (0..ranks.ids.len()).filter(|&i| !assigned[i]).collect();
        order.sort_by(|&a, &b| {
            ranks.ranks[a][r]
                .distance
                .total_cmp(&ranks.ranks[b][r].distance)
                .then(a.cmp(&b))
        });
        for i in order {
            let entry = ranks.ranks[i][r];
            let c = entry.cluster;
            if selected[c].len() < quotas[c] {
                selected[c].push(Selection {
                    id: ranks.ids[i].clone(),
                    cluster: c,
                    rank: r + 1,
                    distance: entry.distance,
                });
                assigned[i] = true;
                if selected[c].len() == quotas[c] {
                    open -= 1;
                    if open == 0 {
                        break;
                    }
                }
            }
        }
    }
    let set = UnsafeSet {
        quotas: quotas.to_vec(),
        selected,
    };
    let missing: usize = set.shortfall().iter().sum();
    if missing > 0 {
        log::warn!("improvement set too small: {missing} quota units left unfilled");
    }
    Ok(set)
}
