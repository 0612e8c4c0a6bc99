//! Ward-linkage agglomerative clustering and dendrogram cuts.
//!
//! Node numbering: leaves are `0..n`, the cluster created by merge `s` is node `n + s`.
//! Merge heights are on the distance scale: two leaves at distance `d` merge at height `d`,
//! and in general the height of merging `A` and `B` is `sqrt(2 |A||B| / (|A|+|B|)) * ||c_A - c_B||`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::DistanceMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// The smaller of the two merged node ids.
    pub left: usize,
    pub right: usize,
    pub height: f64,
    /// Number of leaves in the new cluster.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

/// Ordering key of a candidate pair: squared Ward distance, then the node-id pair.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    key: (usize, usize),
}

impl Candidate {
    fn better_than(&self, other: &Candidate) -> bool {
        self.d2 < other.d2 || (self.d2 == other.d2 && self.key < other.key)
    }
}

struct WardState {
    d2: Vec<f64>,
    n: usize,
    node: Vec<usize>,
    size: Vec<usize>,
    active: Vec<bool>,
    nearest: Vec<Option<usize>>,
}

impl WardState {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d2[i * self.n + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d2[i * self.n + j] = v;
        self.d2[j * self.n + i] = v;
    }

    fn candidate(&self, i: usize, j: usize) -> Candidate {
        let (a, b) = (self.node[i], self.node[j]);
        Candidate {
            d2: self.at(i, j),
            key: (a.min(b), a.max(b)),
        }
    }

    fn recompute_nearest(&mut self, i: usize) {
        let mut best: Option<(usize, Candidate)> = None;
        for j in 0..self.n {
            if j == i || !self.active[j] {
                continue;
            }
            let c = self.candidate(i, j);
            if best.as_ref().map_or(true, |(_, b)| c.better_than(b)) {
                best = Some((j, c));
            }
        }
        self.nearest[i] = best.map(|(j, _)| j);
    }
}

/// Agglomerates the `n` items of `dm` into one cluster, always merging the pair with the
/// smallest Ward distance (ties: the lexicographically smallest `(min id, max id)` pair).
pub fn hac_ward(dm: &DistanceMatrix) -> Result<Dendrogram> {
    let n = dm.len();
    if n < 2 {
        return Err(Error::InvalidMatrix(format!("clustering needs at least 2 items, got {n}")));
    }
    if let Some(v) = dm.packed().iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix(format!("matrix contains {v}")));
    }
    let mut st = WardState {
        d2: vec![0.0; n * n],
        n,
        node: (0..n).collect(),
        size: vec![1; n],
        active: vec![true; n],
        nearest: vec![None; n],
    };
    for i in 0..n {
        for j in 0..i {
            let d = dm.get(i, j);
            st.set(i, j, d * d);
        }
    }
    for i in 0..n {
        st.recompute_nearest(i);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(usize, usize, Candidate)> = None;
        for i in 0..n {
            if !st.active[i] {
                continue;
            }
            let Some(j) = st.nearest[i] else { continue };
            let c = st.candidate(i, j);
            if best.as_ref().map_or(true, |(_, _, b)| c.better_than(b)) {
                best = Some((i, j, c));
            }
        }
        let (i, j, c) = best.expect("at least two active clusters remain");
        let (a, b) = (i.min(j), i.max(j));
        let (na, nb) = (st.size[a] as f64, st.size[b] as f64);
        let dab = st.at(a, b);
        for k in 0..n {
            if !st.active[k] || k == a || k == b {
                continue;
            }
            let nk = st.size[k] as f64;
            let v = ((na + nk) * st.at(a, k) + (nb + nk) * st.at(b, k) - nk * dab) / (na + nb + nk);
            st.set(a, k, v.max(0.0));
        }
        let size = st.size[a] + st.size[b];
        merges.push(Merge {
            left: c.key.0,
            right: c.key.1,
            height: dab.sqrt(),
            size,
        });
        st.active[b] = false;
        st.size[a] = size;
        st.node[a] = n + step;

        st.recompute_nearest(a);
        for k in 0..n {
            if !st.active[k] || k == a {
                continue;
            }
            match st.nearest[k] {
                Some(p) if p == a || p == b => st.recompute_nearest(k),
                Some(p) => {
                    if st.candidate(k, a).better_than(&st.candidate(k, p)) {
                        st.nearest[k] = Some(a);
                    }
                }
                None => st.recompute_nearest(k),
            }
        }
    }
    Ok(Dendrogram { leaves: n, merges })
}

/// Flat clustering of the leaves: `labels[i]` is the cluster of leaf `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl ClusterAssignment {
    /// Validates that labels cover exactly `0..k` and match the id list.
    pub fn new(k: usize, ids: Vec<String>, labels: Vec<usize>) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::invalid("one label per image is required"));
        }
        let mut seen = vec![false; k];
        for &l in &labels {
            if l >= k {
                return Err(Error::invalid(format!("cluster {l} outside 0..{k}")));
            }
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("every cluster must be nonempty"));
        }
        Ok(Self { k, ids, labels })
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    pub fn member_ids(&self, cluster: usize) -> Vec<String> {
        self.members(cluster).into_iter().map(|i| self.ids[i].clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Applies the first `n - k` merges. Clusters are numbered by the first leaf they contain.
pub fn cut(dendrogram: &Dendrogram, ids: &[String], k: usize) -> Result<ClusterAssignment> {
    let n = dendrogram.leaves;
    if ids.len() != n {
        return Err(Error::invalid(format!("{} ids for {n} leaves", ids.len())));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cluster count {k} outside 1..={n}")));
    }
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    for (s, m) in dendrogram.merges.iter().take(n - k).enumerate() {
        let (l, r) = (find(&mut parent, m.left), find(&mut parent, m.right));
        parent[l] = n + s;
        parent[r] = n + s;
    }
    let mut label_of_root = std::collections::HashMap::new();
    let labels = (0..n)
        .map(|i| {
            let root = find(&mut parent, i);
            let next = label_of_root.len();
            *label_of_root.entry(root).or_insert(next)
        })
        .collect();
    ClusterAssignment::new(k, ids.to_vec(), labels)
}
