//! Command-line orchestration of the debugging workflow over `hudd-core`.
//!
//! A run is described by a TOML [`config::RunConfig`] and lives in `runs/<name>/`. Each
//! automated step is a [`stage::Stage`] that reads upstream artifacts, writes its own and
//! records a manifest of input hashes, parameters and outputs, so unchanged stages are skipped
//! on reruns. The manual steps of the workflow are file handoffs: the cluster report goes out
//! for inspection, and the improvement set and an optional labels CSV come in.

pub mod config;
pub mod error;
pub mod font;
pub mod pipeline;
pub mod report;
pub mod stage;

pub use config::RunConfig;
pub use error::{PipelineError, Result};
pub use pipeline::Pipeline;
pub use stage::{Outcome, Stage};
