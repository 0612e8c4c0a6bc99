//! Synthetic scenario generator and evaluation harness.
//!
//! [`scene`] renders 32x32 grayscale images of a pointing hand from sampled parameters with
//! injectable hard regions (near-boundary angles, heavy occlusion, low brightness).
//! [`dataset`] stores them as PGM files with a manifest, [`stats`] measures cluster purity and
//! effect sizes, and [`experiment`] runs the full debugging and retraining comparison.

pub mod dataset;
pub mod experiment;
pub mod scene;
pub mod stats;

pub use dataset::{read_dataset, write_dataset, LoadedDataset, Manifest, ManifestRow};
pub use experiment::{
    analyze, baseline_b1, baseline_b2, default_candidate_layers, reduced_improvement_set, run_experiment,
    select_unsafe, EvaluationReport, HuddAnalysis, Method, MethodRun, Scenario, ScenarioConfig, ScenarioData,
};
pub use scene::{angle_to_class, generate, GeneratedImage, HardRegions, SceneSpec, SimParams, CLASS_NAMES};
pub use stats::{population_variance, threshold_profile, vargha_delaney, variance_reduction, RrTable, ThresholdPoint};
