//! Ward agglomeration against exhaustive search, dendrogram cuts, WICD extremes, knee
//! detection and the invariances of normalized distance matrices.

mod oracles;

use hudd_core::cluster::{cut, hac_ward, knee_point, wicd, ClusterAssignment};
use hudd_core::heatmap::{distance_matrix, normalize_layer, DistanceMatrix};
use hudd_core::lrp::{Heatmap, LayerHeatmaps};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ward_matches_exhaustive_search_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let n = rng.gen_range(2..=8);
        let d = oracles::random_dissimilarities(n, &mut rng);
        if let Err(e) = oracles::ward_agrees(&d) {
            panic!("case {case} (n = {n}): {e}");
        }
    }
}

#[test]
fn ward_matches_exhaustive_search_on_euclidean_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.gen_range(3..=12);
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let d: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| pts.iter().map(|b| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()).collect())
            .collect();
        oracles::ward_agrees(&d).unwrap();
    }
}

#[test]
fn ties_merge_the_lowest_pair_first() {
    let d = vec![vec![0.0, 1.0, 1.0, 1.0], vec![1.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0, 1.0], vec![1.0, 1.0, 1.0, 0.0]];
    oracles::ward_agrees(&d).unwrap();
    let dm = DistanceMatrix::from_dense(0, oracles::ids(4), &d).unwrap();
    let m = hac_ward(&dm).unwrap().merges;
    assert_eq!((m[0].left, m[0].right), (0, 1));
    assert_eq!((m[1].left, m[1].right), (2, 3));
}

fn same_partition(a: &ClusterAssignment, b: &ClusterAssignment) -> bool {
    (0..a.labels.len()).all(|i| (0..a.labels.len()).all(|j| (a.labels[i] == a.labels[j]) == (b.labels[i] == b.labels[j])))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn finer_cuts_refine_coarser_ones(seed in any::<u64>(), n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = oracles::random_dissimilarities(n, &mut rng);
        let dm = DistanceMatrix::from_dense(0, oracles::ids(n), &d).unwrap();
        let dendro = hac_ward(&dm).unwrap();
        let heights: Vec<f64> = dendro.merges.iter().map(|m| m.height).collect();
        prop_assert!(heights.windows(2).all(|w| w[0] <= w[1] + 1e-12), "Ward heights are monotone");
        for k in 1..n {
            let coarse = cut(&dendro, dm.ids(), k).unwrap();
            let fine = cut(&dendro, dm.ids(), k + 1).unwrap();
            prop_assert_eq!(coarse.k, k);
            prop_assert_eq!(fine.sizes().iter().filter(|s| **s > 0).count(), k + 1);
            for i in 0..n {
                for j in 0..n {
                    if fine.labels[i] == fine.labels[j] {
                        prop_assert_eq!(coarse.labels[i], coarse.labels[j]);
                    }
                }
            }
            let first_seen: Vec<usize> = (0..k).map(|c| coarse.labels.iter().position(|&l| l == c).unwrap()).collect();
            prop_assert!(first_seen.windows(2).all(|w| w[0] < w[1]), "clusters are numbered by first leaf");
        }
    }

    #[test]
    fn wicd_extremes(seed in any::<u64>(), n in 2usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = oracles::random_dissimilarities(n, &mut rng);
        let dm = DistanceMatrix::from_dense(0, oracles::ids(n), &d).unwrap();
        let dendro = hac_ward(&dm).unwrap();
        prop_assert_eq!(wicd(&cut(&dendro, dm.ids(), n).unwrap(), &dm).unwrap(), 0.0);
        let all: Vec<usize> = (0..n).collect();
        let one = wicd(&cut(&dendro, dm.ids(), 1).unwrap(), &dm).unwrap();
        prop_assert!((one - oracles::icd_oracle(&d, &all)).abs() <= 1e-9 * one.max(1.0));
    }

    #[test]
    fn cuts_do_not_depend_on_relabelling_the_ids(seed in any::<u64>(), n in 3usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = oracles::random_dissimilarities(n, &mut rng);
        let dm = DistanceMatrix::from_dense(0, oracles::ids(n), &d).unwrap();
        let other: Vec<String> = (0..n).map(|i| format!("other-{i}")).collect();
        let dm2 = DistanceMatrix::from_dense(0, other, &d).unwrap();
        let (a, b) = (hac_ward(&dm).unwrap(), hac_ward(&dm2).unwrap());
        prop_assert_eq!(&a, &b);
        let k = rng.gen_range(1..=n);
        prop_assert!(same_partition(&cut(&a, dm.ids(), k).unwrap(), &cut(&b, dm2.ids(), k).unwrap()));
    }

    #[test]
    fn knee_is_invariant_to_positive_affine_maps(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let (curve, _) = oracles::hockey_stick(&mut ChaCha8Rng::seed_from_u64(seed));
        let mapped: Vec<(usize, f64)> = curve.iter().map(|&(k, v)| (k, scale * v + shift)).collect();
        prop_assert_eq!(knee_point(&curve).unwrap(), knee_point(&mapped).unwrap());
    }

    #[test]
    fn normalization_preserves_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = oracles::random_layer(1, 4, 3, 5, -2.0, 2.0, &mut rng);
        let (norm, _) = normalize_layer(&maps).unwrap();
        let raw: Vec<f64> = maps.maps.iter().flat_map(|m| m.values.clone()).collect();
        let out: Vec<f64> = norm.maps.iter().flat_map(|m| m.values.clone()).collect();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                if raw[i] < raw[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
    }

    #[test]
    fn normalized_distances_ignore_positive_affine_maps(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = oracles::random_layer(1, 5, 2, 6, -1.0, 1.0, &mut rng);
        let mut mapped = LayerHeatmaps::new(1, 5, 2);
        for (id, m) in maps.ids.iter().zip(&maps.maps) {
            let v = m.values.iter().map(|x| scale * x + shift).collect();
            mapped.push(id.clone(), Heatmap::new(1, 5, 2, v).unwrap()).unwrap();
        }
        let a = distance_matrix(&normalize_layer(&maps).unwrap().0, true).unwrap();
        let b = distance_matrix(&normalize_layer(&mapped).unwrap().0, true).unwrap();
        for (x, y) in a.packed().iter().zip(b.packed()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn hockey_sticks_put_the_knee_next_to_the_elbow() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut hits = 0;
    for _ in 0..100 {
        let (curve, k0) = oracles::hockey_stick(&mut rng);
        let knee = knee_point(&curve).unwrap();
        if knee.k.abs_diff(k0) <= 1 && !knee.weak {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100 knees within one step of the elbow");
}
