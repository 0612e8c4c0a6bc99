//! End-to-end evaluation on the synthetic scenario: base training, root-cause clustering with
//! variance-reduction analysis, unsafe-set selection, and retraining with the clustering-driven
//! selection against the two random-selection baselines.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{select_root_cause_clusters, RootCauseClusters};
use crate::error::{Error, Result};
use crate::heatmap::improvement_distance_matrix;
use crate::lrp::{heatmaps_for_set, HeatmapRequest, SeedMode};
use crate::micronet::{evaluate, train, AccuracyReport, LabeledDataset, Network, Sample, TrainConfig};
use crate::retrain::{balance, bootstrap_to, label_balanced, retrain, BalancedUnsafeSet};
use crate::selector::{assign_unsafe, cluster_quotas, rank_clusters, SelectionConfig, UnsafeSet};
use crate::synthlab::dataset::{to_labeled, Manifest, ManifestRow};
use crate::synthlab::scene::{generate, GeneratedImage, SceneSpec, SimParams, CLASS_NAMES};
use crate::synthlab::stats::{default_thresholds, threshold_profile, vargha_delaney, RrTable, ThresholdPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scene: SceneSpec,
    pub train_size: usize,
    pub test_size: usize,
    pub improvement_size: usize,
    /// Hard-region probability of the training set.
    pub train_hard: f64,
    /// Hard-region probability of the test and improvement sets.
    pub eval_hard: f64,
    pub train: TrainConfig,
    pub retrain: TrainConfig,
    pub sf: f64,
    /// Heatmap layers to cluster; defaults to every parameterized layer except the output.
    pub candidate_layers: Option<Vec<usize>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_size: 1000,
            test_size: 2000,
            improvement_size: 4000,
            train_hard: 0.01,
            eval_hard: 0.15,
            train: TrainConfig {
                epochs: 20,
                learning_rate: 0.05,
                batch_size: 16,
                seed: 0,
                warm_start: false,
            },
            retrain: TrainConfig {
                epochs: 4,
                learning_rate: 0.01,
                batch_size: 16,
                seed: 0,
                warm_start: true,
            },
            sf: 0.3,
            candidate_layers: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.retrain.validate()?;
        if self.train_size == 0 || self.test_size == 0 || self.improvement_size == 0 {
            return Err(Error::invalid("training, test and improvement sets must be nonempty"));
        }
        for p in [self.train_hard, self.eval_hard, self.sf] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("probability or factor {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Every parameterized layer except the last, as heatmap (activation) indices.
pub fn default_candidate_layers(network: &Network) -> Vec<usize> {
    let n = network.layers().len();
    (0..n)
        .filter(|&i| network.layers()[i].is_parameterized() && i + 1 < n)
        .map(|i| i + 1)
        .collect()
}

/// Generated data sets of one scenario seed.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub train: Vec<GeneratedImage>,
    pub test: Vec<GeneratedImage>,
    pub improvement: Vec<GeneratedImage>,
}

impl ScenarioData {
    pub fn generate(config: &ScenarioConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let spec = |p: f64| config.scene.with_hard_probability(p);
        Ok(Self {
            train: generate(&spec(config.train_hard), config.train_size, base ^ 1, "tr")?,
            test: generate(&spec(config.eval_hard), config.test_size, base ^ 2, "ts")?,
            improvement: generate(&spec(config.eval_hard), config.improvement_size, base ^ 3, "im")?,
        })
    }
}

pub fn manifest_of(images: &[GeneratedImage]) -> Manifest {
    Manifest {
        rows: images
            .iter()
            .map(|g| ManifestRow {
                id: g.id.clone(),
                path: format!("images/{}.pgm", g.id),
                label: g.label,
                params: g.params,
            })
            .collect(),
    }
}

/// Data, labeled sets and trained base model of one scenario seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub improvement: LabeledDataset,
    pub test_manifest: Manifest,
    pub model: Network,
}

impl Scenario {
    pub fn build(config: &ScenarioConfig, seed: u64) -> Result<Self> {
        let data = ScenarioData::generate(config, seed)?;
        let side = config.scene.side;
        let train_set = to_labeled(side, &data.train)?;
        let classes = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        let init = Network::default_classifier(side, classes, seed)?;
        let tc = TrainConfig {
            seed,
            warm_start: false,
            ..config.train
        };
        let model = train(&init, &train_set, &tc)?;
        Ok(Self {
            config: config.clone(),
            seed,
            test_manifest: manifest_of(&data.test),
            train: train_set,
            test: to_labeled(side, &data.test)?,
            improvement: to_labeled(side, &data.improvement)?,
            model,
        })
    }
}

/// Root-cause clusters of the base model's test errors and their parameter purity.
#[derive(Debug, Clone)]
pub struct HuddAnalysis {
    pub test_report: AccuracyReport,
    pub clusters: RootCauseClusters,
    pub rr: RrTable,
    pub profile: Vec<ThresholdPoint>,
}

fn requests<'a>(samples: &[&'a Sample]) -> Vec<HeatmapRequest<'a>> {
    samples
        .iter()
        .map(|s| HeatmapRequest {
            id: &s.id,
            image: &s.image,
            truth: None,
        })
        .collect()
}

/// Clusters the heatmaps of the test images the model gets wrong and measures variance
/// reduction of every scene parameter within the clusters.
pub fn analyze(model: &Network, test: &LabeledDataset, manifest: &Manifest, layers: Option<&[usize]>) -> Result<HuddAnalysis> {
    let report = evaluate(model, test)?;
    let errors: Vec<&Sample> = test
        .samples
        .iter()
        .zip(&report.correct)
        .filter(|(_, ok)| !**ok)
        .map(|(s, _)| s)
        .collect();
    if errors.len() < 2 {
        return Err(Error::invalid(format!(
            "only {} error-inducing test images; at least 2 are needed",
            errors.len()
        )));
    }
    let candidates = match layers {
        Some(l) => l.to_vec(),
        None => default_candidate_layers(model),
    };
    let store = heatmaps_for_set(model, &requests(&errors), SeedMode::PredictedClass, Some(&candidates))?;
    let per_layer = candidates.iter().map(|&l| store.layer(l)).collect::<Result<Vec<_>>>()?;
    let clusters = select_root_cause_clusters(&per_layer)?.clusters;
    let rr = RrTable::compute(&clusters.members, manifest, &SimParams::NAMES)?;
    let profile = threshold_profile(&rr, &default_thresholds());
    Ok(HuddAnalysis {
        test_report: report,
        clusters,
        rr,
        profile,
    })
}

/// Selects the unsafe improvement images for the clusters: quotas from the test-set size and
/// accuracy, single-linkage ranking on raw heatmaps of the clustering layer, rank sweep.
pub fn select_unsafe(
    model: &Network,
    test: &LabeledDataset,
    analysis: &HuddAnalysis,
    improvement: &LabeledDataset,
    sf: f64,
) -> Result<UnsafeSet> {
    let layer = analysis.clusters.layer;
    let config = SelectionConfig {
        sf,
        test_size: test.len(),
        test_accuracy: analysis.test_report.accuracy,
    };
    let quotas = cluster_quotas(&config, &analysis.clusters.sizes())?;
    let error_ids: std::collections::HashSet<&str> =
        analysis.clusters.members.iter().flatten().map(String::as_str).collect();
    let errors: Vec<&Sample> = test.samples.iter().filter(|s| error_ids.contains(s.id.as_str())).collect();
    let imp: Vec<&Sample> = improvement.samples.iter().collect();
    let err_maps = heatmaps_for_set(model, &requests(&errors), SeedMode::PredictedClass, Some(&[layer]))?;
    let imp_maps = heatmaps_for_set(model, &requests(&imp), SeedMode::PredictedClass, Some(&[layer]))?;
    let dm = improvement_distance_matrix(imp_maps.layer(layer)?, err_maps.layer(layer)?)?;
    let ranks = rank_clusters(&dm, &analysis.clusters)?;
    assign_unsafe(&ranks, &quotas.rounded)
}

/// Misclassified members of the labeled reduced improvement set, resampled to `target`.
pub fn baseline_b1(reduced: &[Sample], network: &Network, target: usize, seed: u64) -> Result<Vec<Sample>> {
    let report = evaluate(network, &LabeledDataset::new(reduced.to_vec()))?;
    let wrong: Vec<Sample> = reduced
        .iter()
        .zip(&report.correct)
        .filter(|(_, ok)| !**ok)
        .map(|(s, _)| s.clone())
        .collect();
    if wrong.is_empty() {
        log::warn!("B1: the model misclassifies none of the {} labeled images", reduced.len());
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(bootstrap_to(&wrong, target, &mut rng))
}

/// Uniform random subset of `budget` improvement images (the reduced improvement set).
pub fn reduced_improvement_set(improvement: &[Sample], budget: usize, seed: u64) -> Result<Vec<Sample>> {
    if budget > improvement.len() {
        return Err(Error::invalid(format!(
            "label budget {budget} exceeds the {} improvement images",
            improvement.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(improvement.choose_multiple(&mut rng, budget).cloned().collect())
}

/// The reduced improvement set resampled to `target`.
pub fn baseline_b2(reduced: &[Sample], target: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bootstrap_to(reduced, target, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Hudd,
    B1,
    B2,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Hudd, Method::B1, Method::B2];

    pub fn name(self) -> &'static str {
        match self {
            Method::Hudd => "HUDD",
            Method::B1 => "B1",
            Method::B2 => "B2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    /// Improvement images whose label is requested.
    pub labels: usize,
    /// Images added to the training set (with duplicates).
    pub retrain_images: usize,
    pub accuracy: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_accuracy: f64,
    pub mean_delta: f64,
}

/// Accuracy table and effect sizes; mirrors the columns IS, US, BLUS, accuracies, deltas, Â12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scenario_seed: u64,
    pub base_accuracy: f64,
    pub test_errors: usize,
    pub layer: usize,
    pub clusters: usize,
    pub cluster_sizes: Vec<usize>,
    pub rr: RrTable,
    pub profile: Vec<ThresholdPoint>,
    pub improvement_set: usize,
    pub unsafe_set: usize,
    pub balanced_unsafe_set: usize,
    pub runs: Vec<MethodRun>,
    pub summary: Vec<MethodSummary>,
    pub a12_vs_b1: f64,
    pub a12_vs_b2: f64,
    pub budget_parity: bool,
    pub seconds: f64,
}

impl EvaluationReport {
    pub fn deltas(&self, method: Method) -> Vec<f64> {
        self.runs.iter().filter(|r| r.method == method).map(|r| r.delta).collect()
    }

    pub fn mean_delta(&self, method: Method) -> f64 {
        let d = self.deltas(method);
        d.iter().sum::<f64>() / d.len().max(1) as f64
    }
}

/// Retraining comparison of one scenario: HUDD against B1 and B2 for each retraining seed,
/// all methods labeling the same number of improvement images.
pub fn run_experiment(scenario: &Scenario, seeds: &[u64]) -> Result<EvaluationReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one retraining seed is required"));
    }
    let start = Instant::now();
    let cfg = &scenario.config;
    let model = &scenario.model;
    let analysis = analyze(model, &scenario.test, &scenario.test_manifest, cfg.candidate_layers.as_deref())
        .map_err(|e| stage("cluster", e))?;
    let unsafe_set = select_unsafe(model, &scenario.test, &analysis, &scenario.improvement, cfg.sf)
        .map_err(|e| stage("select", e))?;
    let budget = unsafe_set.total();
    if budget == 0 {
        return Err(stage("select", Error::invalid("the unsafe set is empty")));
    }
    let by_id: HashMap<String, Sample> =
        scenario.improvement.samples.iter().map(|s| (s.id.clone(), s.clone())).collect();
    let base_accuracy = analysis.test_report.accuracy;

    let per_seed = seeds
        .par_iter()
        .map(|&seed| -> Result<(usize, Vec<MethodRun>)> {
            let balanced: BalancedUnsafeSet = balance(&unsafe_set, seed).map_err(|e| stage("retrain", e))?;
            let blus_size = balanced.total();
            let hudd_set = label_balanced(&balanced, &by_id)?;
            let reduced = reduced_improvement_set(&scenario.improvement.samples, budget, seed ^ 0xB1B2)?;
            let b1 = baseline_b1(&reduced, model, blus_size, seed ^ 0xB1)?;
            let b2 = baseline_b2(&reduced, blus_size, seed ^ 0xB2);
            let tc = TrainConfig {
                seed,
                warm_start: true,
                ..cfg.retrain
            };
            let mut runs = Vec::new();
            for (method, set) in [
                (Method::Hudd, hudd_set),
                (Method::B1, LabeledDataset::new(b1)),
                (Method::B2, LabeledDataset::new(b2)),
            ] {
                let retrained = retrain(model, &scenario.train, &set, &tc).map_err(|e| stage("retrain", e))?;
                let accuracy = evaluate(&retrained, &scenario.test)?.accuracy;
                log::info!("seed {seed} {}: accuracy {accuracy:.4}", method.name());
                runs.push(MethodRun {
                    method,
                    seed,
                    labels: budget,
                    retrain_images: set.len(),
                    accuracy,
                    delta: accuracy - base_accuracy,
                });
            }
            Ok((blus_size, runs))
        })
        .collect::<Result<Vec<_>>>()?;
    let blus_size = per_seed.last().map_or(0, |p| p.0);
    let runs: Vec<MethodRun> = per_seed.into_iter().flat_map(|p| p.1).collect();

    let summary = Method::ALL
        .iter()
        .map(|&m| {
            let r: Vec<&MethodRun> = runs.iter().filter(|r| r.method == m).collect();
            let n = r.len() as f64;
            MethodSummary {
                method: m,
                mean_accuracy: r.iter().map(|x| x.accuracy).sum::<f64>() / n,
                mean_delta: r.iter().map(|x| x.delta).sum::<f64>() / n,
            }
        })
        .collect();
    let acc = |m: Method| -> Vec<f64> { runs.iter().filter(|r| r.method == m).map(|r| r.accuracy).collect() };
    let budget_parity = seeds.iter().all(|&s| {
        let labels: Vec<usize> = runs.iter().filter(|r| r.seed == s).map(|r| r.labels).collect();
        labels.windows(2).all(|w| w[0] == w[1])
    });
    Ok(EvaluationReport {
        scenario_seed: scenario.seed,
        base_accuracy,
        test_errors: analysis.test_report.num_errors(),
        layer: analysis.clusters.layer,
        clusters: analysis.clusters.k(),
        cluster_sizes: analysis.clusters.sizes(),
        rr: analysis.rr.clone(),
        profile: analysis.profile.clone(),
        improvement_set: scenario.improvement.len(),
        unsafe_set: budget,
        balanced_unsafe_set: blus_size,
        a12_vs_b1: vargha_delaney(&acc(Method::Hudd), &acc(Method::B1))?,
        a12_vs_b2: vargha_delaney(&acc(Method::Hudd), &acc(Method::B2))?,
        runs,
        summary,
        budget_parity,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn stage(name: &str, e: Error) -> Error {
    Error::InvalidInput(format!("stage {name}: {e}"))
}
