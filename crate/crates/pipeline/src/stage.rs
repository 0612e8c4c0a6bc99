//! Stage bookkeeping: every stage records the SHA-256 of its inputs and outputs and its
//! parameters in `stages/<stage>.json`, and is skipped when all of them are unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    Train,
    Eval,
    Heatmaps,
    Cluster,
    Select,
    Retrain,
    Experiment,
    Report,
}

impl Stage {
    /// Stages of `run-all`, in execution order.
    pub const CHAIN: [Stage; 8] = [
        Stage::Generate,
        Stage::Train,
        Stage::Eval,
        Stage::Heatmaps,
        Stage::Cluster,
        Stage::Select,
        Stage::Retrain,
        Stage::Report,
    ];

    /// Subcommand that runs the stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Heatmaps => "heatmaps",
            Stage::Cluster => "cluster",
            Stage::Select => "select",
            Stage::Retrain => "retrain",
            Stage::Experiment => "experiment",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.command())
    }
}

/// An artifact a stage reads, with the subcommand that produces it.
#[derive(Debug, Clone)]
pub struct Input {
    pub name: String,
    pub path: PathBuf,
    pub producer: Stage,
}

impl Input {
    pub fn new(name: impl Into<String>, path: impl Into<PathBuf>, producer: Stage) -> Self {
        Self {
            name: name.into(),
            path: path.into(),
            producer,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.path.exists() {
            Ok(())
        } else {
            Err(PipelineError::MissingArtifact {
                what: self.name.clone(),
                path: self.path.clone(),
                producer: self.producer.command(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub params: serde_json::Value,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory to content hash.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

impl StageManifest {
    pub fn path(run_dir: &Path, stage: Stage) -> PathBuf {
        run_dir.join("stages").join(format!("{stage}.json"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::file(path, e))?;
        serde_json::from_str(&text).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::file(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::file(path, e))
}

/// SHA-256 of a file, or of a directory tree: relative paths and file contents in sorted
/// path order.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return Ok(hex(&hash_file(path)?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let name = rel.to_string_lossy().replace('\\', "/");
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update(hash_file(&path.join(&rel))?);
    }
    Ok(hex(&hasher.finalize()))
}

fn hash_file(path: &Path) -> Result<[u8; 32]> {
    let mut file = fs::File::open(path).map_err(|e| PipelineError::file(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| PipelineError::file(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().into())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| PipelineError::file(dir, e))? {
        let path = entry.map_err(|e| PipelineError::file(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("walked below the root").to_path_buf());
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

/// Runs `body` unless the recorded manifest of `stage` matches `params`, the current input
/// hashes and the current output hashes. `body` returns the paths it wrote; all of them must
/// lie inside `run_dir`.
pub fn run_stage<F>(
    run_dir: &Path,
    stage: Stage,
    params: serde_json::Value,
    inputs: &[Input],
    force: bool,
    body: F,
) -> Result<Outcome>
where
    F: FnOnce() -> Result<Vec<PathBuf>>,
{
    let tag = |e: PipelineError| match e {
        PipelineError::Stage { .. } => e,
        other => PipelineError::Stage {
            stage,
            source: Box::new(other),
        },
    };
    let mut input_hashes = BTreeMap::new();
    for input in inputs {
        input.check().map_err(tag)?;
        input_hashes.insert(input.name.clone(), hash_path(&input.path).map_err(tag)?);
    }
    let manifest_path = StageManifest::path(run_dir, stage);
    if !force && manifest_path.is_file() {
        if let Ok(old) = StageManifest::read(&manifest_path) {
            if old.params == params && old.inputs == input_hashes && outputs_unchanged(run_dir, &old.outputs) {
                log::info!("{stage}: up to date, skipped");
                return Ok(Outcome::Skipped);
            }
        }
    }
    let start = Instant::now();
    log::info!("{stage}: running");
    let written = body().map_err(tag)?;
    let mut outputs = BTreeMap::new();
    for path in written {
        let rel = path
            .strip_prefix(run_dir)
            .map_err(|_| tag(PipelineError::invalid(format!("output {} outside the run directory", path.display()))))?;
        outputs.insert(rel.to_string_lossy().replace('\\', "/"), hash_path(&path).map_err(tag)?);
    }
    let manifest = StageManifest {
        stage,
        params,
        inputs: input_hashes,
        outputs,
        seconds: start.elapsed().as_secs_f64(),
    };
    manifest.write(&manifest_path).map_err(tag)?;
    log::info!("{stage}: done in {:.1} s", manifest.seconds);
    Ok(Outcome::Ran)
}

fn outputs_unchanged(run_dir: &Path, outputs: &BTreeMap<String, String>) -> bool {
    outputs.iter().all(|(rel, hash)| {
        let path = run_dir.join(rel);
        path.exists() && hash_path(&path).is_ok_and(|h| &h == hash)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_tracks_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("d");
        fs::create_dir_all(d.join("sub")).unwrap();
        fs::write(d.join("a.txt"), "1").unwrap();
        fs::write(d.join("sub/b.txt"), "2").unwrap();
        let h0 = hash_path(&d).unwrap();
        assert_eq!(h0, hash_path(&d).unwrap());
        fs::write(d.join("sub/b.txt"), "3").unwrap();
        let h1 = hash_path(&d).unwrap();
        assert_ne!(h0, h1);
        fs::rename(d.join("a.txt"), d.join("c.txt")).unwrap();
        assert_ne!(h1, hash_path(&d).unwrap());
    }

    #[test]
    fn file_hash_is_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, "abc").unwrap();
        assert_eq!(
            hash_path(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn stages_skip_on_matching_hashes_and_rerun_otherwise() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path();
        let input = run.join("in.txt");
        fs::write(&input, "x").unwrap();
        let out = run.join("out.txt");
        let inputs = [Input::new("in", &input, Stage::Generate)];
        let body = || {
            fs::write(&out, "y").unwrap();
            Ok(vec![out.clone()])
        };
        let params = serde_json::json!({"k": 1});
        assert_eq!(run_stage(run, Stage::Train, params.clone(), &inputs, false, body).unwrap(), Outcome::Ran);
        assert_eq!(run_stage(run, Stage::Train, params.clone(), &inputs, false, body).unwrap(), Outcome::Skipped);
        assert_eq!(run_stage(run, Stage::Train, params.clone(), &inputs, true, body).unwrap(), Outcome::Ran);
        assert_eq!(run_stage(run, Stage::Train, serde_json::json!({"k": 2}), &inputs, false, body).unwrap(), Outcome::Ran);
        fs::write(&out, "tampered").unwrap();
        assert_eq!(run_stage(run, Stage::Train, serde_json::json!({"k": 2}), &inputs, false, body).unwrap(), Outcome::Ran);
        fs::write(&input, "changed").unwrap();
        assert_eq!(run_stage(run, Stage::Train, serde_json::json!({"k": 2}), &inputs, false, body).unwrap(), Outcome::Ran);
    }

    #[test]
    fn missing_inputs_name_their_producer() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = [Input::new("clusters", dir.path().join("clusters.csv"), Stage::Cluster)];
        let e = run_stage(dir.path(), Stage::Select, serde_json::json!({}), &inputs, false, || Ok(vec![])).unwrap_err();
        assert_eq!(e.stage(), Some(Stage::Select));
        let msg = e.to_string();
        assert!(msg.contains("hudd cluster"), "{msg}");
    }
}
