//! Independent reference implementations used by the integration tests and the acceptance
//! harness. Everything here is written as plain scalar loops over the textbook definitions,
//! sharing no code with the library beyond its data types.

#![allow(dead_code)]

use hudd_core::lrp::{Heatmap, LayerHeatmaps};
use hudd_core::micronet::{Conv2d, Dense, Layer, MaxPool, Network, Task, Tensor};
use rand::Rng;

/// Random symmetric matrix with zero diagonal and entries uniform in `(0.1, 10)`.
pub fn random_dissimilarities<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..i {
            let v = rng.gen_range(0.1..10.0);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i:03}")).collect()
}

/// Error sum of squares of a group, written through pairwise squared dissimilarities:
/// `ESS(A) = (1/|A|) * sum over unordered pairs of d(i, j)^2`.
fn ess(d: &[Vec<f64>], members: &[usize]) -> f64 {
    let mut s = 0.0;
    for a in 0..members.len() {
        for b in 0..a {
            s += d[members[a]][members[b]].powi(2);
        }
    }
    s / members.len() as f64
}

/// One brute-force agglomeration step record: merged node ids (smaller first) and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleMerge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
}

/// Ward agglomeration by exhaustive search: at every step each pair of current clusters is
/// scored by the increase in error sum of squares `delta = ESS(A u B) - ESS(A) - ESS(B)`, the
/// smallest increase wins (ties: smallest `(min id, max id)`), and the merge height is
/// `sqrt(2 * delta)`. Node ids follow the usual convention: leaves `0..n`, merge `s`
/// creates node `n + s`.
pub fn ward_oracle(d: &[Vec<f64>]) -> Vec<OracleMerge> {
    let n = d.len();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut out = Vec::new();
    for s in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut union = clusters[a].1.clone();
                union.extend(&clusters[b].1);
                let delta = ess(d, &union) - ess(d, &clusters[a].1) - ess(d, &clusters[b].1);
                let (ia, ib) = (clusters[a].0, clusters[b].0);
                let key = (ia.min(ib), ia.max(ib));
                let better = match best {
                    None => true,
                    Some((bd, bk, _, _)) => delta < bd || (delta == bd && key < bk),
                };
                if better {
                    best = Some((delta, key, a, b));
                }
            }
        }
        let (delta, key, a, b) = best.expect("at least two clusters remain");
        out.push(OracleMerge {
            left: key.0,
            right: key.1,
            height: (2.0 * delta.max(0.0)).sqrt(),
        });
        let mut merged = clusters[a].1.clone();
        merged.extend(&clusters[b].1);
        clusters.remove(b);
        clusters.remove(a);
        clusters.push((n + s, merged));
    }
    out
}

/// Random layer heatmaps of `count` images, values uniform in `(lo, hi)`.
pub fn random_layer<R: Rng>(layer: usize, rows: usize, cols: usize, count: usize, lo: f64, hi: f64, rng: &mut R) -> LayerHeatmaps {
    let mut maps = LayerHeatmaps::new(layer, rows, cols);
    for i in 0..count {
        let values = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        maps.push(format!("img{i:04}"), Heatmap::new(layer, rows, cols, values).unwrap())
            .unwrap();
    }
    maps
}

/// Smallest and largest entry over every cell of every heatmap of the layer.
pub fn layer_min_max(maps: &[Vec<Vec<f64>>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in maps {
        for row in m {
            for &v in row {
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
        }
    }
    (lo, hi)
}

/// Heatmaps as nested `[image][row][col]` vectors.
pub fn as_grids(maps: &LayerHeatmaps) -> Vec<Vec<Vec<f64>>> {
    maps.maps
        .iter()
        .map(|h| (0..h.rows).map(|i| (0..h.cols).map(|j| h.get(i, j)).collect()).collect())
        .collect()
}

/// Min-max normalization of one entry.
pub fn normalize_entry(v: f64, lo: f64, hi: f64) -> f64 {
    (v - lo) / (hi - lo)
}

/// Euclidean distance between two equally sized matrices.
pub fn euclidean(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            s += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
        }
    }
    s.sqrt()
}

/// Mean distance over the unique pairs of a cluster; a singleton has no pairs and scores 0.
pub fn icd_oracle(d: &[Vec<f64>], members: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..members.len() {
        for b in (a + 1)..members.len() {
            sum += d[members[a]][members[b]];
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Weighted intra-cluster distance with the outer division by the number of clusters.
pub fn wicd_oracle(d: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let total = labels.len() as f64;
    let mut acc = 0.0;
    for c in 0..k {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        acc += icd_oracle(d, &members) * members.len() as f64 / total;
    }
    acc / k as f64
}

/// Real-valued quota of one cluster.
pub fn quota_oracle(test_size: usize, sf: f64, accuracy: f64, cluster_size: usize, clustered: usize) -> f64 {
    (test_size as f64 * sf) * (1.0 - accuracy) * (cluster_size as f64 / clustered as f64)
}

/// Vargha-Delaney effect size by direct pair counting.
pub fn a12_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut score = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                score += 1.0;
            } else if x == y {
                score += 0.5;
            }
        }
    }
    score / (a.len() * b.len()) as f64
}

/// Small random networks, one per layer kind, all ending in a dense output layer.
pub fn gradient_networks<R: Rng>(rng: &mut R) -> Vec<(&'static str, Network)> {
    let names = |n: usize| (0..n).map(|i| format!("o{i}")).collect::<Vec<_>>();
    let randomize_bias = |layers: &mut [Layer], rng: &mut R| {
        for l in layers.iter_mut() {
            if let Some((_, b)) = l.params_mut() {
                b.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
        }
    };
    let mut out = Vec::new();

    let mut l = vec![Layer::Dense(Dense::new(5, 3, rng))];
    randomize_bias(&mut l, rng);
    out.push(("dense", Network::new(vec![5], Task::Classification, l, names(3)).unwrap()));

    let mut l = vec![Layer::Dense(Dense::new(5, 6, rng)), Layer::Relu, Layer::Dense(Dense::new(6, 3, rng))];
    randomize_bias(&mut l, rng);
    out.push(("relu", Network::new(vec![5], Task::Classification, l, names(3)).unwrap()));

    let mut l = vec![
        Layer::Conv2d(Conv2d::new(2, 3, 3, 2, 1, rng)),
        Layer::Flatten,
        Layer::Dense(Dense::new(3 * 3 * 3, 4, rng)),
    ];
    randomize_bias(&mut l, rng);
    out.push(("conv2d", Network::new(vec![2, 6, 6], Task::Classification, l, names(4)).unwrap()));

    let mut l = vec![
        Layer::Conv2d(Conv2d::new(1, 2, 3, 1, 0, rng)),
        Layer::MaxPool(MaxPool { window: 2, stride: 2 }),
        Layer::Flatten,
        Layer::Dense(Dense::new(2 * 3 * 3, 3, rng)),
    ];
    randomize_bias(&mut l, rng);
    out.push(("maxpool", Network::new(vec![1, 8, 8], Task::Classification, l, names(3)).unwrap()));

    let mut l = vec![Layer::Flatten, Layer::Dense(Dense::new(12, 2, rng))];
    randomize_bias(&mut l, rng);
    out.push(("flatten", Network::new(vec![3, 2, 2], Task::Regression, l, names(2)).unwrap()));
    out
}

/// Random input tensor for a network, uniform in `(0, 1)`.
pub fn random_input<R: Rng>(net: &Network, rng: &mut R) -> Tensor {
    let shape = net.input_shape().to_vec();
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Relative disagreement used by the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Piecewise-linear regime of a forward pass: the sign pattern at every ReLU input and the
/// winning position of every max-pool window.
pub fn activation_pattern(net: &Network, input: &Tensor) -> Vec<usize> {
    let (_, trace) = net.forward(input).unwrap();
    let mut pattern = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let x = trace.layer_input(i);
        match layer {
            Layer::Relu => pattern.extend(x.data().iter().map(|&v| usize::from(v > 0.0))),
            Layer::MaxPool(p) => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = ((h - p.window) / p.stride + 1, (w - p.window) / p.stride + 1);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for dy in 0..p.window {
                                for dx in 0..p.window {
                                    let idx = (ch * h + oy * p.stride + dy) * w + ox * p.stride + dx;
                                    if x.data()[idx] > best.0 {
                                        best = (x.data()[idx], idx);
                                    }
                                }
                            }
                            pattern.push(best.1);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    pattern
}

fn loss_of(net: &Network, input: &Tensor, target: &hudd_core::micronet::Target) -> f64 {
    let (_, trace) = net.forward(input).unwrap();
    hudd_core::micronet::loss_and_grad(net.task(), trace.final_output().data(), target).0
}

/// Outcome of a gradient check: the largest relative error over all compared coordinates,
/// the number compared, and the number skipped because the two probe points straddle a
/// ReLU or max-pool switch where the derivative is undefined.
#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub worst: f64,
    pub compared: usize,
    pub skipped: usize,
}

/// Compares the analytic gradient (parameters and input) with the central difference of
/// step `h`.
pub fn gradient_check(net: &Network, input: &Tensor, target: &hudd_core::micronet::Target, h: f64) -> GradientCheck {
    let (_, trace) = net.forward(input).unwrap();
    let (_, g) = hudd_core::micronet::loss_and_grad(net.task(), trace.final_output().data(), target);
    let mut grads = net.zero_grads();
    let input_grad = net.backward(&trace, &g, &mut grads, true).unwrap();
    let mut res = GradientCheck { worst: 0.0, compared: 0, skipped: 0 };
    let mut record = |analytic: f64, plus: (f64, Vec<usize>), minus: (f64, Vec<usize>)| {
        if plus.1 != minus.1 {
            res.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * h);
        res.worst = res.worst.max(relative_error(analytic, numeric));
        res.compared += 1;
    };

    for (li, layer_grads) in grads.iter().enumerate() {
        let Some(lg) = layer_grads else { continue };
        for (which, analytic) in [(0, &lg.weights), (1, &lg.bias)] {
            for (pi, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut n = net.clone();
                    let (w, b) = n.layers_mut()[li].params_mut().unwrap();
                    if which == 0 {
                        w[pi] += delta;
                    } else {
                        b[pi] += delta;
                    }
                    (loss_of(&n, input, target), activation_pattern(&n, input))
                };
                record(a, eval(h), eval(-h));
            }
        }
    }
    for (i, &a) in input_grad.iter().enumerate() {
        let eval = |delta: f64| {
            let mut x = input.clone();
            x.data_mut()[i] += delta;
            (loss_of(net, &x, target), activation_pattern(net, &x))
        };
        record(a, eval(h), eval(-h));
    }
    res
}

/// A target matching the network task: a random class or random regression values.
pub fn random_target<R: Rng>(net: &Network, rng: &mut R) -> hudd_core::micronet::Target {
    match net.task() {
        Task::Classification => hudd_core::micronet::Target::Class(rng.gen_range(0..net.num_outputs())),
        Task::Regression => hudd_core::micronet::Target::Values((0..net.num_outputs()).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Random labels covering exactly `0..k`.
pub fn random_labels<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    labels
}

/// Layer minimum and maximum (the bounds every normalized entry is measured against):
/// discrepancy between the library statistics and a scan over all entries.
pub fn eq1_discrepancy<R: Rng>(rng: &mut R) -> f64 {
    let (rows, cols, count) = (rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(1..8));
    let maps = random_layer(3, rows, cols, count, -5.0, 5.0, rng);
    let (lo, hi) = layer_min_max(&as_grids(&maps));
    let (_, stats) = hudd_core::heatmap::normalize_layer(&maps).unwrap();
    rel(stats.min, lo).max(rel(stats.max, hi))
}

/// Min-max normalized entries.
pub fn eq2_discrepancy<R: Rng>(rng: &mut R) -> f64 {
    let (rows, cols, count) = (rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(2..8));
    let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
    let maps = random_layer(3, rows, cols, count, -scale, scale, rng);
    let grids = as_grids(&maps);
    let (lo, hi) = layer_min_max(&grids);
    let (norm, _) = hudd_core::heatmap::normalize_layer(&maps).unwrap();
    let mut worst: f64 = 0.0;
    for (x, grid) in grids.iter().enumerate() {
        for i in 0..rows {
            for j in 0..cols {
                worst = worst.max(rel(norm.maps[x].get(i, j), normalize_entry(grid[i][j], lo, hi)));
            }
        }
    }
    worst
}

/// Heatmap distance as the Euclidean distance of normalized matrices: the library distance
/// matrix and pairwise distance function against the double loop over cells.
pub fn eq34_discrepancy<R: Rng>(rng: &mut R) -> f64 {
    let (rows, cols, count) = (rng.gen_range(1..9), rng.gen_range(1..5), rng.gen_range(2..9));
    let maps = random_layer(5, rows, cols, count, -1.0, 3.0, rng);
    let grids = as_grids(&maps);
    let (lo, hi) = layer_min_max(&grids);
    let normalized: Vec<Vec<Vec<f64>>> = grids
        .iter()
        .map(|g| g.iter().map(|r| r.iter().map(|&v| normalize_entry(v, lo, hi)).collect()).collect())
        .collect();
    let (norm, _) = hudd_core::heatmap::normalize_layer(&maps).unwrap();
    let dm = hudd_core::heatmap::distance_matrix(&norm, true).unwrap();
    let mut worst: f64 = 0.0;
    for a in 0..count {
        for b in 0..count {
            let want = euclidean(&normalized[a], &normalized[b]);
            worst = worst.max(rel(dm.get(a, b), want));
            let pair = hudd_core::heatmap::heatmap_distance(&norm.maps[a], &norm.maps[b]).unwrap();
            worst = worst.max(rel(pair, want));
        }
    }
    worst
}

fn random_assignment<R: Rng>(rng: &mut R) -> (Vec<Vec<f64>>, hudd_core::heatmap::DistanceMatrix, hudd_core::cluster::ClusterAssignment) {
    let n = rng.gen_range(2..14);
    let k = rng.gen_range(1..=n);
    let d = random_dissimilarities(n, rng);
    let dm = hudd_core::heatmap::DistanceMatrix::from_dense(0, ids(n), &d).unwrap();
    let a = hudd_core::cluster::ClusterAssignment::new(k, ids(n), random_labels(n, k, rng)).unwrap();
    (d, dm, a)
}

/// Weighted intra-cluster distance, including the outer division by the cluster count.
pub fn eq5_discrepancy<R: Rng>(rng: &mut R) -> f64 {
    let (d, dm, a) = random_assignment(rng);
    rel(hudd_core::cluster::wicd(&a, &dm).unwrap(), wicd_oracle(&d, &a.labels, a.k))
}

/// Intra-cluster distance of every cluster.
pub fn eq6_discrepancy<R: Rng>(rng: &mut R) -> f64 {
    let (d, dm, a) = random_assignment(rng);
    let mut worst: f64 = 0.0;
    for c in 0..a.k {
        let members: Vec<usize> = (0..a.labels.len()).filter(|&i| a.labels[i] == c).collect();
        let want = icd_oracle(&d, &members);
        worst = worst.max(rel(hudd_core::cluster::icd(&a, &dm, c).unwrap(), want));
        worst = worst.max(rel(hudd_core::cluster::icds(&a, &dm).unwrap()[c], want));
    }
    worst
}

/// Real-valued per-cluster quotas.
pub fn eq7_discrepancy<R: Rng>(rng: &mut R) -> f64 {
    let k = rng.gen_range(1..20);
    let sizes: Vec<usize> = (0..k).map(|_| rng.gen_range(1..500)).collect();
    let clustered: usize = sizes.iter().sum();
    let cfg = hudd_core::selector::SelectionConfig {
        sf: rng.gen_range(0.0..1.0),
        test_size: rng.gen_range(clustered..clustered * 20 + 1),
        test_accuracy: rng.gen_range(0.0..1.0),
    };
    let q = hudd_core::selector::cluster_quotas(&cfg, &sizes).unwrap();
    sizes
        .iter()
        .zip(&q.raw)
        .map(|(&s, &got)| rel(got, quota_oracle(cfg.test_size, cfg.sf, cfg.test_accuracy, s, clustered)))
        .fold(0.0, f64::max)
}

/// Named equation-level checks, each returning the largest relative discrepancy for one
/// random instance.
pub fn equation_checks<R: Rng>() -> Vec<(&'static str, fn(&mut R) -> f64)> {
    vec![
        ("layer min/max", eq1_discrepancy::<R>),
        ("min-max normalization", eq2_discrepancy::<R>),
        ("heatmap distance", eq34_discrepancy::<R>),
        ("WICD", eq5_discrepancy::<R>),
        ("ICD", eq6_discrepancy::<R>),
        ("cluster quotas", eq7_discrepancy::<R>),
    ]
}

/// Piecewise-linear decreasing curve over `k = 2..=last` with its elbow at `k0`: slope
/// `-steep` before the elbow, a much gentler slope after it, and a small jitter.
pub fn hockey_stick<R: Rng>(rng: &mut R) -> (Vec<(usize, f64)>, usize) {
    let last = rng.gen_range(12..=50);
    let k0 = rng.gen_range(5..=last - 4);
    let steep = rng.gen_range(0.5..5.0);
    let gentle = steep * rng.gen_range(0.0..0.1);
    let base = rng.gen_range(0.0..10.0);
    let jitter = 1e-3 * steep;
    let curve = (2..=last)
        .map(|k| {
            let v = if k <= k0 {
                base + steep * (k0 - k) as f64
            } else {
                base - gentle * (k - k0) as f64
            };
            (k, v + rng.gen_range(-jitter..=jitter))
        })
        .collect();
    (curve, k0)
}

/// Compares the library Ward agglomeration with the brute-force oracle on one matrix:
/// merged node ids must agree exactly and heights to a relative `1e-9`.
pub fn ward_agrees(d: &[Vec<f64>]) -> Result<(), String> {
    let n = d.len();
    let dm = hudd_core::heatmap::DistanceMatrix::from_dense(0, ids(n), d).map_err(|e| e.to_string())?;
    let got = hudd_core::cluster::hac_ward(&dm).map_err(|e| e.to_string())?;
    let want = ward_oracle(d);
    if got.merges.len() != want.len() {
        return Err(format!("{} merges vs {}", got.merges.len(), want.len()));
    }
    for (s, (g, w)) in got.merges.iter().zip(&want).enumerate() {
        if (g.left, g.right) != (w.left, w.right) {
            return Err(format!("step {s}: merged ({}, {}) but the oracle merged ({}, {})", g.left, g.right, w.left, w.right));
        }
        if (g.height - w.height).abs() > 1e-9 * w.height.max(1.0) {
            return Err(format!("step {s}: height {} vs {}", g.height, w.height));
        }
    }
    Ok(())
}

/// Heatmaps drawn around `centres` random prototypes with small jitter, so that the
/// layer has a clear cluster structure.
pub fn blob_layer<R: Rng>(layer: usize, count: usize, centres: usize, rng: &mut R) -> LayerHeatmaps {
    let (rows, cols) = (6, 2);
    let protos: Vec<Vec<f64>> = (0..centres).map(|_| (0..rows * cols).map(|_| rng.gen_range(0.0..5.0)).collect()).collect();
    let mut maps = LayerHeatmaps::new(layer, rows, cols);
    for i in 0..count {
        let p = &protos[rng.gen_range(0..centres)];
        let values = p.iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        maps.push(format!("err{i:04}"), Heatmap::new(layer, rows, cols, values).unwrap()).unwrap();
    }
    maps
}

/// Number of images whose unsafe-set cluster differs from their root-cause cluster when the
/// error-inducing set itself is offered as the improvement set with quotas equal to the
/// cluster sizes, plus the number of images left unassigned.
pub fn self_assignment_mismatches(errors: &LayerHeatmaps, clusters: &hudd_core::cluster::RootCauseClusters) -> usize {
    let rect = hudd_core::heatmap::improvement_distance_matrix(errors, errors).unwrap();
    let ranks = hudd_core::selector::rank_clusters(&rect, clusters).unwrap();
    let set = hudd_core::selector::assign_unsafe(&ranks, &clusters.sizes()).unwrap();
    let mut home = std::collections::HashMap::new();
    for (c, members) in clusters.members.iter().enumerate() {
        for id in members {
            home.insert(id.clone(), c);
        }
    }
    let wrong = set.iter().filter(|s| home[&s.id] != s.cluster).count();
    wrong + (errors.len() - set.total())
}
