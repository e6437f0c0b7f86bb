//! `cocite` command line: dataset building, MoE extension, training,
//! evaluation and embedding.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cocite::ErrorKind;

use commands::*;
use config::{load_section, resolve};

#[derive(Parser)]
#[command(name = "cocite", version, about = "Co-citation similarity models", args_override_self = true)]
struct Cli {
    /// TOML file with one table per command; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build co-citation pair splits from paper records.
    BuildDataset(BuildDatasetArgs),
    /// Write a synthetic records file with planted topic clusters.
    GenerateCorpus(GenerateCorpusArgs),
    /// Turn a dense checkpoint into a mixture-of-experts checkpoint.
    Extend(ExtendArgs),
    /// Contrastive training with validation and early stopping.
    Train(TrainArgs),
    /// Score a pair file with a checkpoint or the TF-IDF baseline.
    Evaluate(EvaluateArgs),
    /// Embed abstracts, one per line.
    Embed(EmbedArgs),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::BuildDataset(a) => build_dataset_cmd(&resolve(&a, load_section(file, "build-dataset")?)?),
        Command::GenerateCorpus(a) => generate_corpus_cmd(&resolve(&a, load_section(file, "generate-corpus")?)?),
        Command::Extend(a) => extend_cmd(&resolve(&a, load_section(file, "extend")?)?),
        Command::Train(a) => train_cmd(&resolve(&a, load_section(file, "train")?)?),
        Command::Evaluate(a) => evaluate_cmd(&resolve(&a, load_section(file, "evaluate")?)?),
        Command::Embed(a) => embed_cmd(&resolve(&a, load_section(file, "embed")?)?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cocite::Error>() {
            return match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Runtime => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
