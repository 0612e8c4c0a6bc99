//! Ward clustering of heatmap distance matrices, WICD scoring, knee-based choice of the
//! cluster count and cross-layer selection of the root-cause clusters.

pub mod hac;
pub mod knee;
pub mod metrics;
pub mod select;

pub use hac::{cut, hac_ward, ClusterAssignment, Dendrogram, Merge};
pub use knee::{derivative, knee_point, CubicSpline, KneeResult};
pub use metrics::{icd, icds, wicd, wicd_curve};
pub use select::{
    candidate_ks, cluster_layer, select_from_matrices, select_root_cause_clusters,
    LayerClusteringResult, LayerSelection, RootCauseClusters, MAX_CLUSTERS,
};
