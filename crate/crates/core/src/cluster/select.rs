//! Per-layer clustering and cross-layer selection of the root-cause clusters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::hac::{cut, hac_ward, ClusterAssignment, Dendrogram};
use crate::cluster::knee::{knee_point, KneeResult};
use crate::cluster::metrics::{icds, wicd, wicd_curve};
use crate::error::{Error, Result};
use crate::heatmap::{distance_matrix, normalize_layer, DistanceMatrix, NormalizationStats};
use crate::lrp::LayerHeatmaps;

/// Largest cluster count evaluated on the WICD curve.
pub const MAX_CLUSTERS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerClusteringResult {
    pub layer: usize,
    pub k: usize,
    pub weak_knee: bool,
    pub assignment: ClusterAssignment,
    pub icds: Vec<f64>,
    pub wicd: f64,
    pub curve: Vec<(usize, f64)>,
    pub dendrogram: Dendrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCauseClusters {
    pub layer: usize,
    pub result: LayerClusteringResult,
    /// Member image ids per cluster, in image order.
    pub members: Vec<Vec<String>>,
}

impl RootCauseClusters {
    pub fn from_result(result: LayerClusteringResult) -> Self {
        let members = (0..result.k).map(|c| result.assignment.member_ids(c)).collect();
        Self {
            layer: result.layer,
            result,
            members,
        }
    }

    pub fn k(&self) -> usize {
        self.result.k
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }
}

/// Candidate cluster counts for `n` images: `2..=min(n - 1, MAX_CLUSTERS)`, or just `1` when
/// fewer than three images are available.
pub fn candidate_ks(n: usize) -> Vec<usize> {
    if n < 3 {
        vec![1]
    } else {
        (2..=(n - 1).min(MAX_CLUSTERS)).collect()
    }
}

/// Clusters one layer: Ward dendrogram, WICD curve over the candidate counts, knee point.
pub fn cluster_layer(dm: &DistanceMatrix) -> Result<LayerClusteringResult> {
    let dendrogram = hac_ward(dm)?;
    let curve = wicd_curve(&dendrogram, dm, candidate_ks(dm.len()))?;
    let KneeResult { k, weak } = knee_point(&curve)?;
    let assignment = cut(&dendrogram, dm.ids(), k)?;
    Ok(LayerClusteringResult {
        layer: dm.layer,
        k,
        weak_knee: weak,
        icds: icds(&assignment, dm)?,
        wicd: wicd(&assignment, dm)?,
        assignment,
        curve,
        dendrogram,
    })
}

/// Picks the layer whose clustering has the smallest WICD; ties go to the deeper layer.
pub fn select_from_matrices(matrices: &[DistanceMatrix]) -> Result<RootCauseClusters> {
    if matrices.is_empty() {
        return Err(Error::invalid("no candidate layers"));
    }
    let results: Vec<LayerClusteringResult> =
        matrices.par_iter().map(cluster_layer).collect::<Result<_>>()?;
    let best = results
        .into_iter()
        .reduce(|a, b| {
            if b.wicd < a.wicd || (b.wicd == a.wicd && b.layer > a.layer) {
                b
            } else {
                a
            }
        })
        .expect("nonempty");
    Ok(RootCauseClusters::from_result(best))
}

/// Output of [`select_root_cause_clusters`]: the winner plus the per-layer intermediates.
#[derive(Debug, Clone)]
pub struct LayerSelection {
    pub clusters: RootCauseClusters,
    pub stats: Vec<NormalizationStats>,
    pub matrices: Vec<DistanceMatrix>,
}

/// Normalizes each candidate layer's raw heatmaps over the error-inducing set, builds its
/// distance matrix, clusters it and keeps the layer with minimal WICD.
pub fn select_root_cause_clusters(layers: &[&LayerHeatmaps]) -> Result<LayerSelection> {
    if layers.is_empty() {
        return Err(Error::invalid("no candidate layers"));
    }
    let mut stats = Vec::with_capacity(layers.len());
    let mut matrices = Vec::with_capacity(layers.len());
    for raw in layers {
        let (normalized, s) = normalize_layer(raw)?;
        stats.push(s);
        matrices.push(distance_matrix(&normalized, true)?);
    }
    let clusters = select_from_matrices(&matrices)?;
    Ok(LayerSelection {
        clusters,
        stats,
        matrices,
    })
}
