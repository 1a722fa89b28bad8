//! `affedit`: train, edit, generate, evaluate and curate datasets from one
//! TOML config.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "affedit", version, about = "Affective image editing at desk scale")]
struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Chat-completions URL; implies an online client.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Force the offline stub client.
    #[arg(long, global = true)]
    offline: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write seeded, untrained checkpoints for every model.
    Init,
    /// Write synthetic data.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Train the autoencoder, denoiser and caption encoder on the corpus.
    TrainBackbone,
    /// Train the emotional spectrum encoder on the corpus captions.
    BuildSpectrum,
    /// Train the emotional mapper with supervisor feedback.
    TrainMapper,
    /// Edit an image towards a description.
    Edit {
        image: PathBuf,
        #[arg(long)]
        text: String,
        /// Noise level to edit from.
        #[arg(long)]
        t: Option<usize>,
        /// Single-channel PNG; white pixels are editable.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an image from noise.
    Generate {
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a JSONL manifest of edits.
    Evaluate {
        manifest: PathBuf,
        /// Report JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-record scores.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Dataset annotation and validation.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Print the noise schedule.
    Schedule {
        /// Write CSV here instead of JSON to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Subcommand)]
pub enum SynthCmd {
    /// Warm/dark training corpus with captions.
    Corpus {
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
    /// Annotated records with planted violations, distractors and a lexicon.
    Fixture,
}

#[derive(Subcommand)]
pub enum DatasetCmd {
    /// Register every PNG in the image directory as a pending record.
    Add,
    /// Run the three-phase annotation on pending records.
    Annotate,
    /// Validate annotated records.
    Validate,
    /// Pair validated records into an evaluation split.
    Split {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum ConfigCmd {
    /// Print the resolved config and its hash.
    Show,
    /// Print the JSON Schema of the config file.
    Schema,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Config(ConfigCmd::Schema) = cli.command {
        println!("{}", serde_json::to_string_pretty(&config::schema())?);
        return Ok(());
    }
    let overrides = Overrides {
        seed: cli.seed,
        t: match &cli.command {
            Command::Edit { t, .. } => *t,
            _ => None,
        },
        endpoint: cli.endpoint.clone(),
        offline: cli.offline,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let hash = cfg.hash();
    log::info!("config {hash}");
    commands::dispatch(cli.command, &cfg, &hash)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::FAILURE
        }
    }
}
