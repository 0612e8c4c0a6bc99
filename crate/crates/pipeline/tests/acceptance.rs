//! Acceptance suite: runs every criterion at its stated tolerance and time limit and prints
//! one PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use hudd_core::cluster::{knee_point, wicd, ClusterAssignment};
use hudd_core::heatmap::DistanceMatrix;
use hudd_core::lrp::{heatmaps_for_set, make_seed, propagate, HeatmapRequest, SeedMode};
use hudd_core::micronet::{Network, Tensor};
use hudd_core::selector::{cluster_quotas, SelectionConfig};
use hudd_core::synthlab::{analyze, run_experiment, vargha_delaney, EvaluationReport, Method, Scenario, ScenarioConfig};
use hudd_pipeline::{Pipeline, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

struct Verdict {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    elapsed: Duration,
    result: Check,
}

fn timed(id: usize, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> Verdict {
    let start = Instant::now();
    let result = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let v = Verdict {
        id,
        name,
        limit,
        elapsed: start.elapsed(),
        result,
    };
    print_verdict(&v);
    v
}

fn passed(v: &Verdict) -> bool {
    v.result.is_ok() && v.limit.is_none_or(|l| v.elapsed <= l)
}

fn print_verdict(v: &Verdict) {
    let detail = match &v.result {
        Ok(d) => d.clone(),
        Err(e) => e.clone(),
    };
    let limit = v.limit.map_or(String::new(), |l| format!(" of {} s allowed", l.as_secs()));
    let mark = if passed(v) { "PASS" } else { "FAIL" };
    println!(
        "{mark} [{:>2}] {}: {detail} ({:.1} s{limit})",
        v.id,
        v.name,
        v.elapsed.as_secs_f64()
    );
}

fn classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

fn lrp_conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for pair in 0..100u64 {
        let side = [12, 16, 20, 24][pair as usize % 4];
        let mut net = Network::default_classifier(side, classes(rng.gen_range(2..9)), pair).unwrap();
        for layer in net.layers_mut() {
            if let Some((_, b)) = layer.params_mut() {
                b.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let x = Tensor::new(vec![1, side, side], (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let (out, trace) = net.forward(&x).unwrap();
        let seed = make_seed(&net, &out, SeedMode::PredictedClass, None).unwrap();
        for m in propagate(&net, &trace, &seed).unwrap() {
            let rel = (m.sum() - seed.value).abs() / seed.value.abs();
            worst = worst.max(rel);
            if rel > 1e-6 {
                return Err(format!("pair {pair}, activation {}: relative error {rel:.3e}", m.layer));
            }
        }
    }
    Ok(format!("100 pairs, worst relative error {worst:.2e} <= 1e-6"))
}

fn ward_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let n = rng.gen_range(2..=8);
        let d = oracles::random_dissimilarities(n, &mut rng);
        oracles::ward_agrees(&d).map_err(|e| format!("matrix {case} (n = {n}): {e}"))?;
    }
    Ok("200 random matrices, n <= 8: identical merge sequences".into())
}

fn equations() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut parts = Vec::new();
    for (name, check) in oracles::equation_checks::<ChaCha8Rng>() {
        let worst = (0..200).map(|_| check(&mut rng)).fold(0.0, f64::max);
        if worst > 1e-9 {
            return Err(format!("{name}: discrepancy {worst:.3e} above 1e-9"));
        }
        parts.push(format!("{name} {worst:.0e}"));
    }
    let d = vec![
        vec![0.0, 4.0, 9.0, 9.0],
        vec![4.0, 0.0, 9.0, 9.0],
        vec![9.0, 9.0, 0.0, 0.0],
        vec![9.0, 9.0, 0.0, 0.0],
    ];
    let dm = DistanceMatrix::from_dense(0, oracles::ids(4), &d).unwrap();
    let a = ClusterAssignment::new(2, oracles::ids(4), vec![0, 0, 1, 1]).unwrap();
    let literal = wicd(&a, &dm).unwrap();
    if literal != 1.0 {
        return Err(format!("WICD of ICDs (4, 0) with weights 1/2 over 2 clusters is {literal}, expected 1"));
    }
    Ok(format!("200 cases each, worst: {}; outer-division example = 1", parts.join(", ")))
}

fn self_assignment(scenario: &Scenario) -> Check {
    let cfg = &scenario.config;
    let analysis =
        analyze(&scenario.model, &scenario.test, &scenario.test_manifest, cfg.candidate_layers.as_deref()).unwrap();
    let clusters = &analysis.clusters;
    let errors: Vec<_> = scenario
        .test
        .samples
        .iter()
        .zip(&analysis.test_report.correct)
        .filter(|(_, ok)| !**ok)
        .map(|(s, _)| HeatmapRequest {
            id: &s.id,
            image: &s.image,
            truth: None,
        })
        .collect();
    let store = heatmaps_for_set(&scenario.model, &errors, SeedMode::PredictedClass, Some(&[clusters.layer])).unwrap();
    let real = oracles::self_assignment_mismatches(store.layer(clusters.layer).unwrap(), clusters);
    if real != 0 {
        return Err(format!("{real} mismatches on the scenario's {} error-inducing images", errors.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..50 {
        let centres = rng.gen_range(2..6);
        let maps = oracles::blob_layer(2, rng.gen_range(8..60), centres, &mut rng);
        let c = hudd_core::cluster::select_root_cause_clusters(&[&maps]).unwrap().clusters;
        let m = oracles::self_assignment_mismatches(&maps, &c);
        if m != 0 {
            return Err(format!("synthetic case {case}: {m} mismatches"));
        }
    }
    Ok(format!(
        "0 mismatches on {} scenario errors in {} clusters and on 50 synthetic layers",
        errors.len(),
        clusters.k()
    ))
}

fn quota_total() -> Check {
    let cfg = SelectionConfig {
        sf: 0.3,
        test_size: 132_630,
        test_accuracy: 0.9595,
    };
    let errors = (132_630f64 * (1.0 - 0.9595)).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (mut lo, mut hi) = (usize::MAX, 0);
    for _ in 0..500 {
        let mut cuts: Vec<usize> = (0..15).map(|_| rng.gen_range(1..errors)).collect();
        cuts.sort();
        cuts.dedup();
        if cuts.len() != 15 {
            continue;
        }
        let sizes: Vec<usize> = cuts
            .iter()
            .chain([&errors])
            .scan(0, |prev, &c| {
                let s = c - *prev;
                *prev = c;
                Some(s)
            })
            .collect();
        let total = cluster_quotas(&cfg, &sizes).unwrap().total();
        lo = lo.min(total);
        hi = hi.max(total);
    }
    if (1611..=1615).contains(&lo) && (1611..=1615).contains(&hi) {
        Ok(format!("budget {:.2}; totals over 500 random 16-cluster splits in [{lo}, {hi}]", cfg.budget()))
    } else {
        Err(format!("totals range [{lo}, {hi}] leaves [1611, 1615]"))
    }
}

fn knee_hockey_sticks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let hits = (0..100)
        .filter(|_| {
            let (curve, k0) = oracles::hockey_stick(&mut rng);
            knee_point(&curve).unwrap().k.abs_diff(k0) <= 1
        })
        .count();
    if hits >= 95 {
        Ok(format!("{hits}/100 within one step of the elbow"))
    } else {
        Err(format!("only {hits}/100 within one step of the elbow"))
    }
}

fn gradients() -> Check {
    let mut worst: f64 = 0.0;
    let mut kinds = std::collections::BTreeSet::new();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (kind, net) in oracles::gradient_networks(&mut rng) {
            let x = oracles::random_input(&net, &mut rng);
            let target = oracles::random_target(&net, &mut rng);
            let c = oracles::gradient_check(&net, &x, &target, 1e-4);
            if c.worst > 1e-3 || c.skipped * 100 > c.compared {
                return Err(format!("{kind}, seed {seed}: {c:?}"));
            }
            worst = worst.max(c.worst);
            kinds.insert(kind);
        }
    }
    let kinds: Vec<&str> = kinds.into_iter().collect();
    Ok(format!("worst relative error {worst:.2e} over {}", kinds.join(", ")))
}

const DETERMINISM_CONFIG: &str = r#"
name = "determinism"
seed = 11

[scenario]
train_size = 500
test_size = 800
improvement_size = 1600

[scenario.train]
epochs = 6
learning_rate = 0.05
batch_size = 16
seed = 0
warm_start = false

[scenario.retrain]
epochs = 2
learning_rate = 0.01
batch_size = 16
seed = 0
warm_start = true
"#;

fn determinism() -> Check {
    let root = tempfile::tempdir().unwrap();
    let run = |sub: &str| -> std::path::PathBuf {
        let dir = root.path().join(sub);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("hudd.toml"), DETERMINISM_CONFIG).unwrap();
        let p = Pipeline::new(RunConfig::load(dir.join("hudd.toml")).unwrap(), false).unwrap();
        p.run_all().unwrap();
        p.run_dir
    };
    let (a, b) = (run("a"), run("b"));
    let files = [
        "clusters/clusters.csv",
        "unsafe/unsafe.csv",
        "model/model.bin",
        "retrained/model.bin",
    ];
    let read = |dir: &Path, f: &str| fs::read(dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
    for f in files {
        if read(&a, f) != read(&b, f) {
            return Err(format!("{f} differs between the two runs"));
        }
    }
    Ok(format!("{} byte-identical across two runs", files.join(", ")))
}

/// Per-seed experiment reports on the default scenario, plus the self-assignment verdict on
/// the first scenario.
fn scenario_sweep(seeds: &[u64]) -> (Vec<Result<EvaluationReport, String>>, Verdict) {
    let cfg = ScenarioConfig::default();
    let mut reports = Vec::new();
    let mut fidelity = None;
    for &s in seeds {
        let r = catch_unwind(AssertUnwindSafe(|| {
            let scenario = Scenario::build(&cfg, s).map_err(|e| e.to_string())?;
            if fidelity.is_none() {
                fidelity = Some(timed(4, "self-assignment fidelity", None, || self_assignment(&scenario)));
            }
            run_experiment(&scenario, &[s]).map_err(|e| e.to_string())
        }))
        .unwrap_or_else(|_| Err(format!("scenario {s} panicked")));
        match &r {
            Ok(rep) => eprintln!(
                "  scenario {s}: accuracy {:.4}, {} errors, layer {}, {} clusters, delta HUDD {:+.4} B1 {:+.4} B2 {:+.4}",
                rep.base_accuracy,
                rep.test_errors,
                rep.layer,
                rep.clusters,
                rep.mean_delta(Method::Hudd),
                rep.mean_delta(Method::B1),
                rep.mean_delta(Method::B2)
            ),
            Err(e) => eprintln!("  scenario {s}: {e}"),
        }
        reports.push(r);
    }
    let fidelity = fidelity.unwrap_or_else(|| Verdict {
        id: 4,
        name: "self-assignment fidelity",
        limit: None,
        elapsed: Duration::ZERO,
        result: Err("no scenario could be built".into()),
    });
    (reports, fidelity)
}

fn percent_at(report: &EvaluationReport, threshold: f64) -> f64 {
    report
        .profile
        .iter()
        .find(|p| p.threshold == threshold)
        .map_or(0.0, |p| p.percent)
}

fn rr_profile(reports: &[Result<EvaluationReport, String>]) -> Check {
    let mut worst_any: f64 = 100.0;
    let mut worst_half: f64 = 100.0;
    for (s, r) in reports.iter().enumerate() {
        let r = r.as_ref().map_err(|e| format!("scenario {s}: {e}"))?;
        let (any, half) = (percent_at(r, 0.0), percent_at(r, 0.5));
        if any < 100.0 || half < 57.0 {
            return Err(format!("scenario {s}: {any:.0}% of clusters with RR > 0, {half:.0}% with RR >= 0.5"));
        }
        worst_any = worst_any.min(any);
        worst_half = worst_half.min(half);
    }
    Ok(format!(
        "{} scenarios; lowest share with RR > 0: {worst_any:.0}%, with RR >= 0.5: {worst_half:.0}% (>= 57%)",
        reports.len()
    ))
}

fn retraining_comparison(reports: &[Result<EvaluationReport, String>]) -> Check {
    let mut deltas = [Vec::new(), Vec::new(), Vec::new()];
    for (s, r) in reports.iter().enumerate() {
        let r = r.as_ref().map_err(|e| format!("scenario {s}: {e}"))?;
        if !r.budget_parity {
            return Err(format!("scenario {s}: methods requested different numbers of labels"));
        }
        for (i, m) in Method::ALL.iter().enumerate() {
            deltas[i].extend(r.deltas(*m));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (h, b1, b2) = (mean(&deltas[0]), mean(&deltas[1]), mean(&deltas[2]));
    let a12 = vargha_delaney(&deltas[0], &deltas[2]).map_err(|e| e.to_string())?;
    let summary = format!(
        "mean improvement HUDD {h:+.4}, B1 {b1:+.4}, B2 {b2:+.4}; A12(HUDD, B2) = {a12:.2} (target 0.60 {})",
        if a12 >= 0.6 { "met" } else { "not met" }
    );
    if h >= b1 && h >= b2 && a12 >= 0.5 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn main() {
    let secs = Duration::from_secs;
    let mut verdicts = vec![
        timed(1, "LRP conservation", Some(secs(30)), lrp_conservation),
        timed(2, "Ward clustering oracle", Some(secs(60)), ward_oracle),
        timed(3, "equation oracles", None, equations),
        timed(5, "GD quota total", None, quota_total),
        timed(8, "knee point on hockey sticks", None, knee_hockey_sticks),
        timed(10, "gradient checks", None, gradients),
        timed(9, "pipeline determinism", None, determinism),
    ];

    let seeds: Vec<u64> = (0..10).collect();
    let start = Instant::now();
    let (reports, fidelity) = scenario_sweep(&seeds);
    let sweep = start.elapsed();
    verdicts.push(fidelity);
    for (id, name, limit, f) in [
        (6, "root-cause purity (RR)", secs(15 * 60), rr_profile as fn(&[Result<EvaluationReport, String>]) -> Check),
        (7, "retraining vs baselines", secs(45 * 60), retraining_comparison),
    ] {
        let v = Verdict {
            id,
            name,
            limit: Some(limit),
            elapsed: sweep,
            result: f(&reports),
        };
        print_verdict(&v);
        verdicts.push(v);
    }

    verdicts.sort_by_key(|v| v.id);
    println!("\nacceptance summary");
    for v in &verdicts {
        print_verdict(v);
    }
    let failed = verdicts.iter().filter(|v| !passed(v)).count();
    println!("{}/{} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
