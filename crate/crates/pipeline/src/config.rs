//! Run configuration: a TOML file validated in full before any stage runs.
//!
//! Relative paths in the file are resolved against the directory that contains it.

use std::fs;
use std::path::{Path, PathBuf};

use hudd_core::synthlab::{ScenarioConfig, SimParams};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run name; artifacts go to `<runs_dir>/<name>`.
    pub name: String,
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    /// Seed of data generation, base training and retraining.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub experiment: ExperimentOptions,
    #[serde(default)]
    pub report: ReportOptions,
}

/// Externally provided inputs. Unset entries are produced inside the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Dataset directories holding `manifest.csv` and the images it lists.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub improvement: Option<PathBuf>,
    /// Trained model to debug instead of training one.
    pub model: Option<PathBuf>,
    /// CSV with columns `id,label` for the unsafe images; labels default to the manifest's.
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentOptions {
    /// Retraining seeds of the method comparison.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { seeds: (0..10).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportOptions {
    /// Member images shown on a cluster's contact sheet.
    pub images_per_sheet: usize,
    /// Pixel magnification of each tile.
    pub tile_scale: usize,
    /// Manifest parameters printed under each tile.
    pub params: Vec<String>,
    /// Also write an animated GIF cycling through every member of each cluster.
    pub gif: bool,
    /// GIF frame rate.
    pub images_per_minute: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            images_per_sheet: 25,
            tile_scale: 3,
            params: vec!["angle".into(), "occlusion".into(), "brightness".into()],
            gif: false,
            images_per_minute: 100.0,
        }
    }
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// A configuration with every optional field at its default.
    pub fn with_name(name: &str) -> Self {
        Self {
            name: name.into(),
            runs_dir: default_runs_dir(),
            seed: 0,
            data: DataPaths::default(),
            scenario: ScenarioConfig::default(),
            experiment: ExperimentOptions::default(),
            report: ReportOptions::default(),
        }
    }

    /// Parses, resolves relative paths against the file's directory and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::file(path, e))?;
        let err = |reason: String| PipelineError::Config {
            path: path.to_path_buf(),
            reason,
        };
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate().map_err(|e| err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes to TOML")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.runs_dir);
        let d = &mut self.data;
        for p in [&mut d.train, &mut d.test, &mut d.improvement, &mut d.model, &mut d.labels]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_char = |c: char| c.is_ascii_alphanumeric() || "-_.".contains(c);
        if self.name.is_empty() || self.name.starts_with('.') || !self.name.chars().all(ok_char) {
            return Err(PipelineError::invalid(format!(
                "run name {:?} must be nonempty, use only letters, digits, '-', '_' and '.', and not start with '.'",
                self.name
            )));
        }
        if self.runs_dir.exists() && !self.runs_dir.is_dir() {
            return Err(PipelineError::invalid(format!("runs_dir {} is not a directory", self.runs_dir.display())));
        }
        self.scenario.validate()?;
        for (what, dir) in [
            ("train", &self.data.train),
            ("test", &self.data.test),
            ("improvement", &self.data.improvement),
        ] {
            if let Some(dir) = dir {
                let manifest = dir.join(hudd_core::synthlab::dataset::MANIFEST_FILE);
                if !manifest.is_file() {
                    return Err(PipelineError::invalid(format!(
                        "data.{what}: {} has no manifest",
                        dir.display()
                    )));
                }
            }
        }
        for (what, file) in [("model", &self.data.model), ("labels", &self.data.labels)] {
            if let Some(file) = file {
                if !file.is_file() {
                    return Err(PipelineError::invalid(format!("data.{what}: {} does not exist", file.display())));
                }
            }
        }
        if self.experiment.seeds.is_empty() {
            return Err(PipelineError::invalid("experiment.seeds must list at least one seed"));
        }
        let r = &self.report;
        if r.images_per_sheet == 0 || r.images_per_sheet > 400 {
            return Err(PipelineError::invalid("report.images_per_sheet must be in 1..=400"));
        }
        if r.tile_scale == 0 || r.tile_scale > 16 {
            return Err(PipelineError::invalid("report.tile_scale must be in 1..=16"));
        }
        if !(r.images_per_minute.is_finite() && r.images_per_minute > 0.0 && r.images_per_minute <= 6000.0) {
            return Err(PipelineError::invalid("report.images_per_minute must be in (0, 6000]"));
        }
        if let Some(p) = r.params.iter().find(|p| !SimParams::NAMES.contains(&p.as_str())) {
            return Err(PipelineError::invalid(format!(
                "report.params: unknown parameter {p}; known: {}",
                SimParams::NAMES.join(", ")
            )));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }
}
