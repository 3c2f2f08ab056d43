use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use trace_seq::{parse_threads, resolve, run_stage, settings, CliError, Overrides, Stage, THREADS_ENV};

#[derive(Parser)]
#[command(name = "trace-seq", version, about = "Synthetic-EHR onset prediction pipeline")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the model variant.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the population, match controls and split.
    GenCohort,
    /// Pre-train code embeddings on a separate corpus.
    PretrainCodes,
    /// Pre-train the sequence autoencoder of the variant's encoder.
    PretrainAutoencoder,
    /// Train the configured variant.
    Train,
    /// Score the trained variant on the validation and test splits.
    Evaluate,
    /// Export back-projected attention for a high-scoring test case.
    ExportAttention,
    /// Export test-split patient embeddings.
    ExportEmbeddings,
    /// Print the normalized configuration.
    ValidateConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenCohort => Stage::GenCohort,
            Command::PretrainCodes => Stage::PretrainCodes,
            Command::PretrainAutoencoder => Stage::PretrainAutoencoder,
            Command::Train => Stage::Train,
            Command::Evaluate => Stage::Evaluate,
            Command::ExportAttention => Stage::ExportAttention,
            Command::ExportEmbeddings => Stage::ExportEmbeddings,
            Command::ValidateConfig => return None,
        })
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let threads = parse_threads(std::env::var(THREADS_ENV).ok().as_deref())?;
    let overrides = Overrides {
        config: cli.config.clone(),
        seed: cli.seed,
        out: cli.out.clone(),
        variant: cli.variant.clone(),
    };
    let ctx = resolve(&overrides, threads)?;
    match cli.command.stage() {
        Some(stage) => {
            let manifest = run_stage(stage, &ctx).with_context(|| format!("stage `{stage}` failed"))?;
            println!("{}", manifest.run_sha256);
        }
        None => print!("{}", settings::to_toml(&ctx.cfg)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
