//! Command-line front end for the CSI identification pipeline.

pub mod commands;
pub mod config;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_eval, cmd_heatmap, cmd_ingest, cmd_preprocess, cmd_synth, cmd_train, MetricsDocument};
pub use config::RunConfig;
pub use error::CliError;

/// Person identification from Wi-Fi channel state information.
///
/// Any configuration key can be set with `--key=value`, e.g.
/// `--hampel.window=15` or `--model.kind=cnn`. Precedence is
/// defaults < --config file < flags. `csi-ident keys` lists every key.
#[derive(Debug, Parser)]
#[command(name = "csi-ident", version)]
struct Cli {
    /// Config file of `key=value` lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labeled corpus and its manifest
    Synth,
    /// Parse one CSI log and report packet rate, gaps and malformed lines
    Ingest { log: PathBuf },
    /// Preprocess and window a manifest into a dataset cache
    Preprocess { manifest: PathBuf },
    /// Train a model on a manifest and evaluate it on the test split
    Train { manifest: PathBuf },
    /// Evaluate a checkpoint on a manifest's test split
    Eval { checkpoint: PathBuf, manifest: PathBuf },
    /// Export a time x subcarrier amplitude grid for one log
    Heatmap { log: PathBuf },
    /// List configuration keys and their defaults
    Keys,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let (rest, overrides) = config::extract_overrides(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg).map(drop),
        Command::Ingest { log } => cmd_ingest(&log, &cfg).map(drop),
        Command::Preprocess { manifest } => cmd_preprocess(&manifest, &cfg).map(drop),
        Command::Train { manifest } => cmd_train(&manifest, &cfg).map(drop),
        Command::Eval { checkpoint, manifest } => cmd_eval(&checkpoint, &manifest, &cfg).map(drop),
        Command::Heatmap { log } => cmd_heatmap(&log, &cfg).map(drop),
        Command::Keys => {
            for (k, default, help) in config::KEYS {
                println!("{k:<28} {default:<18} {help}");
            }
            Ok(())
        }
    }
}
