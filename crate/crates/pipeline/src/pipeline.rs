//! The stages of a run. Each stage reads artifacts from the run directory (or configured
//! external data), writes its own artifacts and records a stage manifest.
//!
//! Run directory layout:
//!
//! ```text
//! runs/<name>/
//!   data/{train,test,improvement}/   generated datasets (manifest.csv + images/)
//!   model/                           model.bin, eval.json, errors.csv
//!   heatmaps/                        layer_<l>.bin, improvement_layer_<l>.bin
//!   distances/                       layer_<l>.bin, improvement_layer_<l>.bin (+ .ids.csv)
//!   clusters/                        clusters.csv, curves.csv, summary.json
//!   unsafe/                          unsafe.csv, quotas.json
//!   retrained/                       model.bin, balanced.csv, accuracy.json
//!   reports/                         experiment.{json,csv}, experiment_runs.csv, clusters/
//!   stages/                          <stage>.json manifests
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use hudd_core::cluster::{cluster_layer, select_root_cause_clusters};
use hudd_core::heatmap::improvement_distance_matrix;
use hudd_core::lrp::{heatmaps_for_set, HeatmapRequest, LayerHeatmaps, SeedMode};
use hudd_core::micronet::{
    evaluate, io as model_io, train, Network, Prediction, Sample, Target, Tensor, TrainConfig,
};
use hudd_core::retrain::{attach_labels, balance, retrain};
use hudd_core::selector::{assign_unsafe, cluster_quotas, rank_members, Selection, SelectionConfig, UnsafeSet};
use hudd_core::synthlab::stats::{default_thresholds, RrTable, ThresholdPoint};
use hudd_core::synthlab::{
    default_candidate_layers, read_dataset, run_experiment, threshold_profile, write_dataset, EvaluationReport,
    LoadedDataset, Manifest, Method, Scenario, ScenarioData, SimParams, CLASS_NAMES,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::report::{render_reports, ReportSummary};
use crate::stage::{run_stage, write_json, Input, Outcome, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Train,
    Test,
    Improvement,
}

impl DataKind {
    pub const ALL: [DataKind; 3] = [DataKind::Train, DataKind::Test, DataKind::Improvement];

    pub fn name(self) -> &'static str {
        match self {
            DataKind::Train => "train",
            DataKind::Test => "test",
            DataKind::Improvement => "improvement",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub test_size: usize,
    pub accuracy: f64,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ErrorRow {
    id: String,
    label: usize,
    predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub id: String,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CurveRow {
    layer: usize,
    k: usize,
    wicd: f64,
    chosen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub k: usize,
    pub wicd: f64,
    pub weak_knee: bool,
    pub heatmap_min: f64,
    pub heatmap_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub layer: usize,
    pub k: usize,
    pub weak_knee: bool,
    pub wicd: f64,
    pub sizes: Vec<usize>,
    pub icds: Vec<f64>,
    pub layers: Vec<LayerSummary>,
    /// Variance reduction of every scene parameter within each cluster.
    pub rr: RrTable,
    pub profile: Vec<ThresholdPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsafeRow {
    pub id: String,
    pub cluster: usize,
    pub rank: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaSummary {
    pub sf: f64,
    pub test_size: usize,
    pub test_accuracy: f64,
    pub budget: f64,
    pub raw: Vec<f64>,
    pub rounded: Vec<usize>,
    pub selected: Vec<usize>,
    pub shortfall: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BalancedRow {
    cluster: usize,
    id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainSummary {
    pub test_size: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub delta: f64,
    pub labels_requested: usize,
    pub retrain_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableRow {
    method: String,
    improvement_set: usize,
    unsafe_set: usize,
    balanced_unsafe_set: usize,
    labels: usize,
    base_accuracy: f64,
    mean_accuracy: f64,
    mean_delta: f64,
    a12_hudd_vs_method: Option<f64>,
}

/// A run: its validated configuration and directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub run_dir: PathBuf,
    /// Rerun stages even when their manifest matches.
    pub force: bool,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::file(dir, e))
}

/// Removes `dir` if present and recreates it empty.
fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| PipelineError::file(dir, e))?;
    }
    create_dir(dir)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| PipelineError::file(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::file(path, e))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Groups `id,cluster` rows into member lists, clusters numbered `0..k`.
pub fn members_of(rows: &[ClusterRow]) -> Result<Vec<Vec<String>>> {
    let k = rows.iter().map(|r| r.cluster + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); k];
    for r in rows {
        members[r.cluster].push(r.id.clone());
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(PipelineError::invalid(format!("cluster {c} has no members")));
    }
    Ok(members)
}

fn class_of(target: &Target) -> Result<usize> {
    match target {
        Target::Class(c) => Ok(*c),
        Target::Values(_) => Err(PipelineError::invalid("the pipeline handles classification datasets only")),
    }
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

/// Reads a labels CSV with columns `id,label`; labels are class indices or class names.
pub fn read_labels(path: &Path) -> Result<HashMap<String, Target>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = HashMap::new();
    for (line, rec) in r.deserialize::<(String, String)>().enumerate() {
        let (id, label) = rec?;
        let label = label.trim();
        let class = label
            .parse::<usize>()
            .ok()
            .or_else(|| CLASS_NAMES.iter().position(|n| n.eq_ignore_ascii_case(label)))
            .filter(|&c| c < CLASS_NAMES.len())
            .ok_or_else(|| {
                PipelineError::invalid(format!("{} row {}: unknown label {label:?}", path.display(), line + 1))
            })?;
        out.insert(id, Target::Class(class));
    }
    Ok(out)
}

impl Pipeline {
    pub fn new(config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let run_dir = config.run_dir();
        create_dir(&run_dir)?;
        Ok(Self { config, run_dir, force })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    pub fn dataset_dir(&self, kind: DataKind) -> PathBuf {
        let external = match kind {
            DataKind::Train => &self.config.data.train,
            DataKind::Test => &self.config.data.test,
            DataKind::Improvement => &self.config.data.improvement,
        };
        external.clone().unwrap_or_else(|| self.run_dir.join("data").join(kind.name()))
    }

    fn dataset_input(&self, kind: DataKind) -> Input {
        Input::new(format!("{} dataset", kind.name()), self.dataset_dir(kind), Stage::Generate)
    }

    pub fn model_path(&self) -> PathBuf {
        self.path("model/model.bin")
    }

    pub fn retrained_model_path(&self) -> PathBuf {
        self.path("retrained/model.bin")
    }

    pub fn clusters_csv(&self) -> PathBuf {
        self.path("clusters/clusters.csv")
    }

    pub fn unsafe_csv(&self) -> PathBuf {
        self.path("unsafe/unsafe.csv")
    }

    fn model_input(&self) -> Input {
        Input::new("model", self.model_path(), Stage::Train)
    }

    fn heatmap_path(&self, layer: usize) -> PathBuf {
        self.path(&format!("heatmaps/layer_{layer}.bin"))
    }

    fn load_dataset(&self, kind: DataKind) -> Result<LoadedDataset> {
        Ok(read_dataset(self.dataset_dir(kind))?)
    }

    fn load_model(&self) -> Result<Network> {
        Ok(model_io::load(self.model_path())?)
    }

    /// Configured candidate layers, or every parameterized layer but the output of the model.
    fn candidate_layers(&self) -> Result<Vec<usize>> {
        match &self.config.scenario.candidate_layers {
            Some(l) => Ok(l.clone()),
            None => {
                self.model_input().check()?;
                Ok(default_candidate_layers(&self.load_model()?))
            }
        }
    }

    pub fn run(&self, stage: Stage) -> Result<Outcome> {
        match stage {
            Stage::Generate => self.generate(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval(),
            Stage::Heatmaps => self.heatmaps(),
            Stage::Cluster => self.cluster(),
            Stage::Select => self.select(),
            Stage::Retrain => self.retrain(),
            Stage::Experiment => self.experiment(),
            Stage::Report => self.report(),
        }
    }

    /// Runs the whole chain from data generation to the cluster report.
    pub fn run_all(&self) -> Result<Vec<(Stage, Outcome)>> {
        Stage::CHAIN.iter().map(|&s| Ok((s, self.run(s)?))).collect()
    }

    fn tagged<T>(&self, stage: Stage, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            PipelineError::Stage { .. } => e,
            other => PipelineError::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }

    fn generate(&self) -> Result<Outcome> {
        let cfg = &self.config;
        let sc = &cfg.scenario;
        let params = json!({
            "seed": cfg.seed,
            "scene": sc.scene,
            "train_size": sc.train_size,
            "test_size": sc.test_size,
            "improvement_size": sc.improvement_size,
            "train_hard": sc.train_hard,
            "eval_hard": sc.eval_hard,
        });
        run_stage(&self.run_dir, Stage::Generate, params, &[], self.force, || {
            let data = ScenarioData::generate(sc, cfg.seed)?;
            let mut written = Vec::new();
            for (kind, images) in [
                (DataKind::Train, &data.train),
                (DataKind::Test, &data.test),
                (DataKind::Improvement, &data.improvement),
            ] {
                let dir = self.dataset_dir(kind);
                if !dir.starts_with(&self.run_dir) {
                    log::info!("generate: {} set taken from {}", kind.name(), dir.display());
                    continue;
                }
                reset_dir(&dir)?;
                write_dataset(&dir, sc.scene.side, images)?;
                written.push(dir);
            }
            Ok(written)
        })
    }

    fn train(&self) -> Result<Outcome> {
        let cfg = &self.config;
        let out = self.model_path();
        if let Some(external) = &cfg.data.model {
            let inputs = [Input::new("external model", external, Stage::Train)];
            return run_stage(&self.run_dir, Stage::Train, json!({"external": true}), &inputs, self.force, || {
                model_io::load(external)?;
                create_dir(out.parent().expect("model path has a parent"))?;
                fs::copy(external, &out).map_err(|e| PipelineError::file(&out, e))?;
                Ok(vec![out.clone()])
            });
        }
        let tc = TrainConfig {
            seed: cfg.seed,
            warm_start: false,
            ..cfg.scenario.train
        };
        let inputs = [self.dataset_input(DataKind::Train)];
        run_stage(&self.run_dir, Stage::Train, json!({ "train": tc }), &inputs, self.force, || {
            let data = self.load_dataset(DataKind::Train)?;
            let first = data.images.first().ok_or(hudd_core::Error::EmptyDataset)?;
            let side = first.shape()[2];
            let classes = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
            let init = Network::default_classifier(side, classes, cfg.seed)?;
            let model = train(&init, &data.labeled(), &tc)?;
            create_dir(out.parent().expect("model path has a parent"))?;
            model_io::save(&model, &out)?;
            Ok(vec![out.clone()])
        })
    }

    fn eval(&self) -> Result<Outcome> {
        let inputs = [self.model_input(), self.dataset_input(DataKind::Test)];
        run_stage(&self.run_dir, Stage::Eval, json!({}), &inputs, self.force, || {
            let model = self.load_model()?;
            let test = self.load_dataset(DataKind::Test)?.labeled();
            let report = evaluate(&model, &test)?;
            let mut rows = Vec::new();
            for (s, ok) in test.samples.iter().zip(&report.correct) {
                if !ok {
                    let predicted = match model.predict(&s.image)? {
                        Prediction::Class(c) => c,
                        Prediction::Values(_) => {
                            return Err(PipelineError::invalid("the pipeline handles classifiers only"))
                        }
                    };
                    rows.push(ErrorRow {
                        id: s.id.clone(),
                        label: class_of(&s.target)?,
                        predicted,
                    });
                }
            }
            let summary = EvalSummary {
                test_size: test.len(),
                accuracy: report.accuracy,
                errors: rows.len(),
            };
            log::info!("eval: accuracy {:.4}, {} error-inducing images", summary.accuracy, summary.errors);
            let (json_path, csv_path) = (self.path("model/eval.json"), self.path("model/errors.csv"));
            write_json(&json_path, &summary)?;
            write_csv(&csv_path, &rows)?;
            Ok(vec![json_path, csv_path])
        })
    }

    fn heatmaps(&self) -> Result<Outcome> {
        let layers = self.tagged(Stage::Heatmaps, self.candidate_layers())?;
        let inputs = [
            self.model_input(),
            self.dataset_input(DataKind::Test),
            Input::new("error list", self.path("model/errors.csv"), Stage::Eval),
        ];
        run_stage(&self.run_dir, Stage::Heatmaps, json!({ "layers": layers }), &inputs, self.force, || {
            let model = self.load_model()?;
            let test = self.load_dataset(DataKind::Test)?.labeled();
            let errors: Vec<ErrorRow> = read_csv(&self.path("model/errors.csv"))?;
            if errors.len() < 2 {
                return Err(PipelineError::invalid(format!(
                    "{} error-inducing test images; clustering needs at least 2",
                    errors.len()
                )));
            }
            let wanted: std::collections::HashSet<&str> = errors.iter().map(|e| e.id.as_str()).collect();
            let samples: Vec<&Sample> = test.samples.iter().filter(|s| wanted.contains(s.id.as_str())).collect();
            if samples.len() != errors.len() {
                return Err(PipelineError::invalid("error list names images missing from the test set"));
            }
            let store = heatmaps_for_set(&model, &requests(&samples), SeedMode::PredictedClass, Some(&layers))?;
            create_dir(&self.path("heatmaps"))?;
            let mut written = Vec::new();
            for &l in &layers {
                let p = self.heatmap_path(l);
                store.layer(l)?.write_to(&p)?;
                written.push(p);
            }
            Ok(written)
        })
    }

    fn cluster(&self) -> Result<Outcome> {
        let layers = self.tagged(Stage::Cluster, self.candidate_layers())?;
        let mut inputs: Vec<Input> = layers
            .iter()
            .map(|&l| Input::new(format!("heatmaps of layer {l}"), self.heatmap_path(l), Stage::Heatmaps))
            .collect();
        inputs.push(Input::new(
            "test manifest",
            self.dataset_dir(DataKind::Test).join("manifest.csv"),
            Stage::Generate,
        ));
        run_stage(&self.run_dir, Stage::Cluster, json!({ "layers": layers }), &inputs, self.force, || {
            let maps = layers
                .iter()
                .map(|&l| LayerHeatmaps::read_from(self.heatmap_path(l)))
                .collect::<hudd_core::Result<Vec<_>>>()?;
            let refs: Vec<&LayerHeatmaps> = maps.iter().collect();
            let selection = select_root_cause_clusters(&refs)?;
            let chosen = &selection.clusters;

            create_dir(&self.path("distances"))?;
            create_dir(&self.path("clusters"))?;
            let mut written = Vec::new();
            let mut curves = Vec::new();
            let mut layer_summaries = Vec::new();
            for (dm, stats) in selection.matrices.iter().zip(&selection.stats) {
                let p = self.path(&format!("distances/layer_{}.bin", dm.layer));
                dm.write_to(&p)?;
                written.push(p.clone());
                written.push(hudd_core::heatmap::ids_sidecar_path(&p));
                let result = cluster_layer(dm)?;
                curves.extend(result.curve.iter().map(|&(k, wicd)| CurveRow {
                    layer: dm.layer,
                    k,
                    wicd,
                    chosen: dm.layer == chosen.layer && k == chosen.k(),
                }));
                layer_summaries.push(LayerSummary {
                    layer: dm.layer,
                    k: result.k,
                    wicd: result.wicd,
                    weak_knee: result.weak_knee,
                    heatmap_min: stats.min,
                    heatmap_max: stats.max,
                });
            }

            let rows: Vec<ClusterRow> = chosen
                .result
                .assignment
                .ids
                .iter()
                .zip(&chosen.result.assignment.labels)
                .map(|(id, &cluster)| ClusterRow { id: id.clone(), cluster })
                .collect();
            let manifest = Manifest::read(self.dataset_dir(DataKind::Test).join("manifest.csv"))?;
            let rr = RrTable::compute(&chosen.members, &manifest, &SimParams::NAMES)?;
            let summary = ClusterSummary {
                layer: chosen.layer,
                k: chosen.k(),
                weak_knee: chosen.result.weak_knee,
                wicd: chosen.result.wicd,
                sizes: chosen.sizes(),
                icds: chosen.result.icds.clone(),
                layers: layer_summaries,
                profile: threshold_profile(&rr, &default_thresholds()),
                rr,
            };
            log::info!("cluster: layer {} with {} clusters, sizes {:?}", summary.layer, summary.k, summary.sizes);
            let (csv_path, curve_path, json_path) = (
                self.clusters_csv(),
                self.path("clusters/curves.csv"),
                self.path("clusters/summary.json"),
            );
            write_csv(&csv_path, &rows)?;
            write_csv(&curve_path, &curves)?;
            write_json(&json_path, &summary)?;
            written.extend([csv_path, curve_path, json_path]);
            Ok(written)
        })
    }

    fn select(&self) -> Result<Outcome> {
        let sf = self.config.scenario.sf;
        let summary_path = self.path("clusters/summary.json");
        let mut inputs = vec![
            Input::new("cluster assignment", self.clusters_csv(), Stage::Cluster),
            Input::new("cluster summary", &summary_path, Stage::Cluster),
            Input::new("evaluation summary", self.path("model/eval.json"), Stage::Eval),
            self.model_input(),
            self.dataset_input(DataKind::Improvement),
        ];
        for input in &inputs {
            self.tagged(Stage::Select, input.check())?;
        }
        let layer = self.tagged(Stage::Select, read_json::<ClusterSummary>(&summary_path))?.layer;
        inputs.push(Input::new(format!("heatmaps of layer {layer}"), self.heatmap_path(layer), Stage::Heatmaps));
        run_stage(&self.run_dir, Stage::Select, json!({ "sf": sf }), &inputs, self.force, || {
            let members = members_of(&read_csv(&self.clusters_csv())?)?;
            let eval: EvalSummary = read_json(&self.path("model/eval.json"))?;
            let config = SelectionConfig {
                sf,
                test_size: eval.test_size,
                test_accuracy: eval.accuracy,
            };
            let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
            let quotas = cluster_quotas(&config, &sizes)?;

            let model = self.load_model()?;
            let improvement = self.load_dataset(DataKind::Improvement)?.labeled();
            let samples: Vec<&Sample> = improvement.samples.iter().collect();
            let imp_store = heatmaps_for_set(&model, &requests(&samples), SeedMode::PredictedClass, Some(&[layer]))?;
            let imp_maps = imp_store.layer(layer)?;
            let err_maps = LayerHeatmaps::read_from(self.heatmap_path(layer))?;
            let dm = improvement_distance_matrix(imp_maps, &err_maps)?;
            let unsafe_set = assign_unsafe(&rank_members(&dm, &members)?, &quotas.rounded)?;

            let imp_heatmaps = self.path(&format!("heatmaps/improvement_layer_{layer}.bin"));
            let imp_dist = self.path(&format!("distances/improvement_layer_{layer}.bin"));
            create_dir(&self.path("unsafe"))?;
            imp_maps.write_to(&imp_heatmaps)?;
            dm.write_to(&imp_dist)?;
            let rows: Vec<UnsafeRow> = unsafe_set
                .iter()
                .map(|s| UnsafeRow {
                    id: s.id.clone(),
                    cluster: s.cluster,
                    rank: s.rank,
                    distance: s.distance,
                })
                .collect();
            let q = QuotaSummary {
                sf,
                test_size: eval.test_size,
                test_accuracy: eval.accuracy,
                budget: config.budget(),
                raw: quotas.raw.clone(),
                rounded: quotas.rounded.clone(),
                selected: unsafe_set.sizes(),
                shortfall: unsafe_set.shortfall(),
            };
            log::info!("select: {} unsafe images for quotas {:?}", rows.len(), q.rounded);
            let (csv_path, json_path) = (self.unsafe_csv(), self.path("unsafe/quotas.json"));
            write_csv(&csv_path, &rows)?;
            write_json(&json_path, &q)?;
            Ok(vec![
                imp_heatmaps,
                imp_dist.clone(),
                hudd_core::heatmap::ids_sidecar_path(&imp_dist),
                csv_path,
                json_path,
            ])
        })
    }

    fn retrain(&self) -> Result<Outcome> {
        let cfg = &self.config;
        let tc = TrainConfig {
            seed: cfg.seed,
            warm_start: true,
            ..cfg.scenario.retrain
        };
        let mut inputs = vec![
            self.model_input(),
            Input::new("unsafe set", self.unsafe_csv(), Stage::Select),
            Input::new("quotas", self.path("unsafe/quotas.json"), Stage::Select),
            self.dataset_input(DataKind::Train),
            self.dataset_input(DataKind::Test),
            self.dataset_input(DataKind::Improvement),
        ];
        if let Some(labels) = &cfg.data.labels {
            inputs.push(Input::new("labels", labels, Stage::Select));
        }
        let params = json!({ "retrain": tc, "labels": cfg.data.labels.is_some() });
        run_stage(&self.run_dir, Stage::Retrain, params, &inputs, self.force, || {
            let rows: Vec<UnsafeRow> = read_csv(&self.unsafe_csv())?;
            let quotas: QuotaSummary = read_json(&self.path("unsafe/quotas.json"))?;
            let mut selected: Vec<Vec<Selection>> = vec![Vec::new(); quotas.rounded.len()];
            for r in &rows {
                let slot = selected
                    .get_mut(r.cluster)
                    .ok_or_else(|| PipelineError::invalid(format!("unsafe image {} in unknown cluster {}", r.id, r.cluster)))?;
                slot.push(Selection {
                    id: r.id.clone(),
                    cluster: r.cluster,
                    rank: r.rank,
                    distance: r.distance,
                });
            }
            let unsafe_set = UnsafeSet {
                quotas: quotas.rounded.clone(),
                selected,
            };
            let balanced = balance(&unsafe_set, cfg.seed)?;

            let improvement = self.load_dataset(DataKind::Improvement)?;
            let labels = match &cfg.data.labels {
                Some(path) => read_labels(path)?,
                None => improvement
                    .manifest
                    .rows
                    .iter()
                    .map(|r| (r.id.clone(), Target::Class(r.label)))
                    .collect(),
            };
            let images: HashMap<String, Tensor> = improvement
                .manifest
                .rows
                .iter()
                .zip(&improvement.images)
                .map(|(r, t)| (r.id.clone(), t.clone()))
                .collect();
            let extra = attach_labels(&balanced, &labels, &images)?;

            let model = self.load_model()?;
            let train_set = self.load_dataset(DataKind::Train)?.labeled();
            let test = self.load_dataset(DataKind::Test)?.labeled();
            let retrained = retrain(&model, &train_set, &extra, &tc)?;
            let before = evaluate(&model, &test)?.accuracy;
            let after = evaluate(&retrained, &test)?.accuracy;
            let summary = RetrainSummary {
                test_size: test.len(),
                accuracy_before: before,
                accuracy_after: after,
                delta: after - before,
                labels_requested: rows.len(),
                retrain_images: extra.len(),
            };
            log::info!("retrain: accuracy {before:.4} -> {after:.4}");

            create_dir(&self.path("retrained"))?;
            let (model_path, csv_path, json_path) = (
                self.retrained_model_path(),
                self.path("retrained/balanced.csv"),
                self.path("retrained/accuracy.json"),
            );
            model_io::save(&retrained, &model_path)?;
            let balanced_rows: Vec<BalancedRow> = balanced
                .clusters
                .iter()
                .enumerate()
                .flat_map(|(c, ids)| ids.iter().map(move |id| BalancedRow { cluster: c, id: id.clone() }))
                .collect();
            write_csv(&csv_path, &balanced_rows)?;
            write_json(&json_path, &summary)?;
            Ok(vec![model_path, csv_path, json_path])
        })
    }

    fn experiment(&self) -> Result<Outcome> {
        let cfg = &self.config;
        let mut inputs = vec![self.model_input()];
        inputs.extend(DataKind::ALL.iter().map(|&k| self.dataset_input(k)));
        let params = json!({
            "seeds": cfg.experiment.seeds,
            "sf": cfg.scenario.sf,
            "retrain": cfg.scenario.retrain,
            "candidate_layers": cfg.scenario.candidate_layers,
        });
        run_stage(&self.run_dir, Stage::Experiment, params, &inputs, self.force, || {
            let test = self.load_dataset(DataKind::Test)?;
            let scenario = Scenario {
                config: cfg.scenario.clone(),
                seed: cfg.seed,
                train: self.load_dataset(DataKind::Train)?.labeled(),
                test: test.labeled(),
                improvement: self.load_dataset(DataKind::Improvement)?.labeled(),
                test_manifest: test.manifest,
                model: self.load_model()?,
            };
            let report = run_experiment(&scenario, &cfg.experiment.seeds)?;
            create_dir(&self.path("reports"))?;
            let (json_path, table_path, runs_path) = (
                self.path("reports/experiment.json"),
                self.path("reports/experiment.csv"),
                self.path("reports/experiment_runs.csv"),
            );
            write_json(&json_path, &report)?;
            write_csv(&table_path, &experiment_table(&report))?;
            write_csv(&runs_path, &report.runs)?;
            Ok(vec![json_path, table_path, runs_path])
        })
    }

    fn report(&self) -> Result<Outcome> {
        let test_dir = self.dataset_dir(DataKind::Test);
        let summary_path = self.path("clusters/summary.json");
        let inputs = [
            Input::new("cluster assignment", self.clusters_csv(), Stage::Cluster),
            Input::new("cluster summary", &summary_path, Stage::Cluster),
            self.dataset_input(DataKind::Test),
        ];
        let params = json!({ "report": self.config.report });
        run_stage(&self.run_dir, Stage::Report, params, &inputs, self.force, || {
            let members = members_of(&read_csv(&self.clusters_csv())?)?;
            let layer = read_json::<ClusterSummary>(&summary_path)?.layer;
            let manifest = Manifest::read(test_dir.join("manifest.csv"))?;
            let out_dir = self.path("reports/clusters");
            reset_dir(&out_dir)?;
            let (summary, mut written) =
                render_reports(&members, layer, &manifest, &test_dir, &self.config.report, &out_dir)?;
            let index = out_dir.join("index.json");
            write_json(&index, &summary)?;
            written.push(index);
            log::info!(
                "report: {} sheets, {} GIFs, {} missing images",
                summary.sheets.len(),
                summary.gifs.len(),
                summary.missing.len()
            );
            Ok(written)
        })
    }

    /// Summary of the last report stage, if one ran.
    pub fn report_summary(&self) -> Result<ReportSummary> {
        read_json(&self.path("reports/clusters/index.json"))
    }
}

/// One row per method with set sizes, accuracies, improvements and the effect size of HUDD
/// against the method.
fn experiment_table(report: &EvaluationReport) -> Vec<TableRow> {
    report
        .summary
        .iter()
        .map(|s| TableRow {
            method: s.method.name().into(),
            improvement_set: report.improvement_set,
            unsafe_set: report.unsafe_set,
            balanced_unsafe_set: report.balanced_unsafe_set,
            labels: report.unsafe_set,
            base_accuracy: report.base_accuracy,
            mean_accuracy: s.mean_accuracy,
            mean_delta: s.mean_delta,
            a12_hudd_vs_method: match s.method {
                Method::Hudd => None,
                Method::B1 => Some(report.a12_vs_b1),
                Method::B2 => Some(report.a12_vs_b2),
            },
        })
        .collect()
}
