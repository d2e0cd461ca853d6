use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semuq::run::{
    build_clients, cmd_aseu_score, cmd_aseu_train, cmd_evaluate, cmd_generate, cmd_report,
    cmd_score, RunConfig, RunError,
};

/// Semantic-uncertainty batch pipeline for question answering.
#[derive(Parser)]
#[command(name = "semuq", version, about)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, default_value = "semuq.toml")]
    config: PathBuf,
    /// Override the generation cache directory.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the run seed (also reseeds the toy model and scorer).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Swap every backend for a seeded deterministic mock.
    #[arg(long, global = true)]
    mock: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample M responses per dataset record into the cache.
    Generate,
    /// Compute the configured uncertainty scores into scores.csv.
    Score,
    /// Label correctness, compute AUROC, and write report.csv + ROC SVGs.
    Evaluate,
    /// Re-emit report files from an existing scores.csv.
    Report,
    /// Train the toy latent model on the bundled synthetic grammar.
    AseuTrain,
    /// Score the grammar prompts with a trained checkpoint.
    AseuScore,
}

fn run(cli: Cli) -> Result<(), RunError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    cfg.apply_overrides(cli.cache, cli.out, cli.seed, cli.mock);
    cfg.validate()?;
    match cli.command {
        Command::Generate => {
            let clients = build_clients(&cfg);
            let client = clients.generation.ok_or_else(|| {
                RunError::Config("generate needs [endpoints.generation] or --mock".into())
            })?;
            cmd_generate(&cfg, &client)?;
        }
        Command::Score => {
            let clients = build_clients(&cfg);
            cmd_score(&cfg, &clients)?;
        }
        Command::Evaluate => {
            cmd_evaluate(&cfg)?;
        }
        Command::Report => {
            cmd_report(&cfg)?;
        }
        Command::AseuTrain => {
            cmd_aseu_train(&cfg)?;
        }
        Command::AseuScore => {
            cmd_aseu_score(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
