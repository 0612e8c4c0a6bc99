//! Cluster cohesion: intra-cluster distance (ICD) and its weighted aggregate (WICD).

use crate::cluster::hac::{cut, ClusterAssignment, Dendrogram};
use crate::error::{Error, Result};
use crate::heatmap::DistanceMatrix;

fn check(assignment: &ClusterAssignment, dm: &DistanceMatrix) -> Result<()> {
    if assignment.labels.len() != dm.len() {
        return Err(Error::DimensionMismatch(format!(
            "assignment covers {} images, matrix {}",
            assignment.labels.len(),
            dm.len()
        )));
    }
    Ok(())
}

fn mean_pair_distance(members: &[usize], dm: &DistanceMatrix) -> f64 {
    let m = members.len();
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for (x, &i) in members.iter().enumerate() {
        for &j in &members[..x] {
            total += dm.get(i, j);
        }
    }
    total / (m * (m - 1) / 2) as f64
}

/// Mean distance over all unordered member pairs of `cluster`; a singleton scores 0.
pub fn icd(assignment: &ClusterAssignment, dm: &DistanceMatrix, cluster: usize) -> Result<f64> {
    check(assignment, dm)?;
    if cluster >= assignment.k {
        return Err(Error::NotFound(format!("cluster {cluster} (k = {})", assignment.k)));
    }
    Ok(mean_pair_distance(&assignment.members(cluster), dm))
}

/// ICD of every cluster, in cluster-id order.
pub fn icds(assignment: &ClusterAssignment, dm: &DistanceMatrix) -> Result<Vec<f64>> {
    check(assignment, dm)?;
    let mut members = vec![Vec::new(); assignment.k];
    for (i, &l) in assignment.labels.iter().enumerate() {
        members[l].push(i);
    }
    Ok(members.iter().map(|m| mean_pair_distance(m, dm)).collect())
}

/// `(sum_j ICD(C_j) * |C_j| / |C|) / k`, where `|C|` is the number of clustered images and
/// `k` the number of clusters.
pub fn wicd(assignment: &ClusterAssignment, dm: &DistanceMatrix) -> Result<f64> {
    let per_cluster = icds(assignment, dm)?;
    let total = assignment.labels.len() as f64;
    let weighted: f64 = per_cluster
        .iter()
        .zip(assignment.sizes())
        .map(|(icd, size)| icd * size as f64 / total)
        .sum();
    Ok(weighted / assignment.k as f64)
}

/// WICD of the dendrogram cut at each `k` in `ks`.
pub fn wicd_curve(
    dendrogram: &Dendrogram,
    dm: &DistanceMatrix,
    ks: impl IntoIterator<Item = usize>,
) -> Result<Vec<(usize, f64)>> {
    let n = dm.len();
    ks.into_iter()
        .map(|k| {
            if k < 1 || k > n {
                return Err(Error::invalid(format!("cluster count {k} outside 1..={n}")));
            }
            let a = cut(dendrogram, dm.ids(), k)?;
            Ok((k, wicd(&a, dm)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(rows: &[Vec<f64>]) -> DistanceMatrix {
        DistanceMatrix::from_dense(0, (0..rows.len()).map(|i| i.to_string()).collect(), rows).unwrap()
    }

    fn assign(k: usize, labels: Vec<usize>) -> ClusterAssignment {
        ClusterAssignment::new(k, (0..labels.len()).map(|i| i.to_string()).collect(), labels).unwrap()
    }

    #[test]
    fn icd_examples() {
        let m = dm(&[
            vec![0.0, 4.0, 1.0, 9.0],
            vec![4.0, 0.0, 2.0, 9.0],
            vec![1.0, 2.0, 0.0, 9.0],
            vec![9.0, 9.0, 9.0, 0.0],
        ]);
        let a = assign(3, vec![0, 0, 1, 2]);
        assert_eq!(icd(&a, &m, 0).unwrap(), 4.0);
        assert_eq!(icd(&a, &m, 2).unwrap(), 0.0);
        assert!(icd(&a, &m, 3).is_err());
        let all = assign(1, vec![0; 4]);
        assert_eq!(icd(&all, &m, 0).unwrap(), (4.0 + 1.0 + 9.0 + 2.0 + 9.0 + 9.0) / 6.0);
    }

    #[test]
    fn wicd_examples() {
        let m = dm(&[
            vec![0.0, 4.0, 5.0, 5.0],
            vec![4.0, 0.0, 5.0, 5.0],
            vec![5.0, 5.0, 0.0, 0.0],
            vec![5.0, 5.0, 0.0, 0.0],
        ]);
        assert_eq!(wicd(&assign(2, vec![0, 0, 1, 1]), &m).unwrap(), 1.0);
        assert_eq!(wicd(&assign(4, vec![0, 1, 2, 3]), &m).unwrap(), 0.0);
        let one = assign(1, vec![0; 4]);
        assert_eq!(wicd(&one, &m).unwrap(), icd(&one, &m, 0).unwrap());
    }
}
