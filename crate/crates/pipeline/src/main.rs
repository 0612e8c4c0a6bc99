//! `hudd`: run the heatmap-based debugging pipeline stage by stage or end to end.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hudd_pipeline::{Outcome, Pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "hudd", version, about = "Heatmap-based unsupervised debugging of image classifiers")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "hudd.toml")]
    config: PathBuf,
    /// Rerun stages even when their inputs and parameters are unchanged.
    #[arg(short, long, global = true)]
    force: bool,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(short, long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a configuration with every option at its default.
    Init {
        /// Run name to put in the configuration.
        #[arg(default_value = "demo")]
        name: String,
    },
    /// Render the synthetic train, test and improvement sets.
    Generate,
    /// Train the model under test.
    Train,
    /// Evaluate on the test set and list the error-inducing images.
    Eval,
    /// Relevance heatmaps of the error-inducing images at the candidate layers.
    Heatmaps,
    /// Root-cause clusters: Ward clustering per layer, knee-selected cluster count, best layer.
    Cluster,
    /// Unsafe improvement images per cluster under label quotas.
    Select,
    /// Balance the labeled unsafe set and fine-tune the model.
    Retrain,
    /// Compare retraining on the unsafe set against two random-selection baselines.
    Experiment,
    /// Contact sheets (and optional GIFs) of every cluster.
    Report,
    /// Every stage from generate to report, skipping up-to-date ones.
    RunAll,
}

fn stage_of(command: &Command) -> Option<Stage> {
    Some(match command {
        Command::Generate => Stage::Generate,
        Command::Train => Stage::Train,
        Command::Eval => Stage::Eval,
        Command::Heatmaps => Stage::Heatmaps,
        Command::Cluster => Stage::Cluster,
        Command::Select => Stage::Select,
        Command::Retrain => Stage::Retrain,
        Command::Experiment => Stage::Experiment,
        Command::Report => Stage::Report,
        Command::Init { .. } | Command::RunAll => return None,
    })
}

fn report(stage: Stage, outcome: Outcome) {
    let word = match outcome {
        Outcome::Ran => "done",
        Outcome::Skipped => "up to date",
    };
    println!("{stage}: {word}");
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Init { name } = &cli.command {
        print!("{}", RunConfig::with_name(name).to_toml());
        return Ok(());
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let config = RunConfig::load(&cli.config)?;
    let pipeline = Pipeline::new(config, cli.force)?;
    match stage_of(&cli.command) {
        Some(stage) => report(stage, pipeline.run(stage)?),
        None => {
            for (stage, outcome) in pipeline.run_all()? {
                report(stage, outcome);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
