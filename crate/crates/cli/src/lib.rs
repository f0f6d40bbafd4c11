//! Config-driven experiment runner.
//!
//! Every subcommand reads one TOML [`config::ExperimentConfig`], writes its
//! artifacts into the output directory and finishes with a
//! `<command>.manifest.json` listing them.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use commands::{TargetArg, TrainVariant};
use config::{ExperimentConfig, Needs};
use error::{CliError, Result};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "mmrec", version, about = "Multi-modal sequential recommendation experiments")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted structure.
    Synth,
    /// Fit the boosted-tree tabular pipeline and write the `tabular` modality file.
    GbdtEmbed,
    /// Train a model and write its checkpoint and curves.
    Train {
        #[arg(value_enum)]
        variant: TrainVariant,
    },
    /// Rank held-out items against sampled negatives.
    Eval {
        checkpoint: Option<PathBuf>,
        /// Score with the ground truth instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value = "test")]
        target: TargetArg,
    },
    /// Run the modality ablation grid and paired t-tests.
    Ablate,
    /// Cluster users by attention profile and write similarity heatmaps.
    Analyze { checkpoint: PathBuf },
}

impl Command {
    fn needs(&self) -> Needs {
        match self {
            Command::Synth => Needs::Nothing,
            Command::GbdtEmbed => Needs::AllButTabular,
            _ => Needs::All,
        }
    }
}

pub fn run(cli: &Cli) -> Result<RunManifest> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config <PATH> is required".into()))?;
    let cfg = ExperimentConfig::load(path, cli.out.as_deref(), cli.seed, cli.command.needs())?;
    let rec = match &cli.command {
        Command::Synth => commands::cmd_synth(&cfg)?,
        Command::GbdtEmbed => commands::cmd_gbdt_embed(&cfg)?,
        Command::Train { variant } => commands::cmd_train(&cfg, *variant)?,
        Command::Eval {
            checkpoint,
            oracle,
            target,
        } => commands::cmd_eval(&cfg, checkpoint.as_deref(), *oracle, (*target).into())?,
        Command::Ablate => commands::cmd_ablate(&cfg)?,
        Command::Analyze { checkpoint } => commands::cmd_analyze(&cfg, checkpoint)?,
    };
    rec.finish()
}
