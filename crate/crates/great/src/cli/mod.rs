//! Command line front end.
//!
//! Every subcommand reads one TOML run configuration ([`RunConfig`]),
//! applies `--seed` and repeatable `--set key=value` overrides, resolves all
//! defaults, and freezes the result as `config.toml` next to its artifacts,
//! so outputs always carry the exact configuration that produced them.
//! Unknown configuration keys and flags are errors, never silently ignored.
//!
//! Subcommands:
//!
//! - `train`: one training run; writes `checkpoint.json`,
//!   `training_log.csv`, and `graph.txt` when the mode uses a graph.
//! - `graph`: the regularization graph a run would train against, built
//!   from an existing checkpoint's embeddings.
//! - `eval`: clean and attacked accuracy of a checkpoint on the test split.
//! - `sweep`: every training mode across label fractions and seeds, with
//!   median tables and accuracy curves.
//! - `attack`: one-shot adversarial example generation to a CSV file.
//!
//! The output directory resolves as `--out`, then the config's `out_dir`,
//! then `$GREAT_OUT_DIR`, then `./great-out`. Artifact writes go through a
//! temp file plus rename, so interrupted runs never leave partial files.
//! Exit codes: 0 on success, 2 for command line errors, 1 for everything
//! else.

mod commands;
mod config;

pub use config::{
    DatasetKind, DatasetSection, EvalSection, InputsSection, ModelSection, RunConfig,
    SweepSection, TrainSection,
};

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::fsutil;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "GREAT_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "great",
    version,
    about = "Graph regularized adversarial training for small classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.json, training_log.csv, and the
    /// regularization graph when the mode uses one.
    Train(CommonArgs),
    /// Build the graph a training run would use, from a checkpoint's
    /// embeddings; writes graph.txt.
    Graph(CommonArgs),
    /// Evaluate a checkpoint's clean and attacked test accuracy; writes
    /// report.csv and report.json.
    Eval(CommonArgs),
    /// Compare every training mode over label fractions and seeds; writes
    /// fraction_table.csv, epsilon_curves.csv, and lambda_curve.csv.
    Sweep(CommonArgs),
    /// Generate adversarial examples from a checkpoint; writes
    /// adversarial.csv.
    Attack(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Train(a)
            | Command::Graph(a)
            | Command::Eval(a)
            | Command::Sweep(a)
            | Command::Attack(a) => a,
        }
    }
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; wins over the config's out_dir and $GREAT_OUT_DIR.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for sweep cells; all cores when absent.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override one config key, e.g. --set train.epochs=50. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Parses the command line, runs the subcommand, and maps the outcome to an
/// exit code for `main`.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land here too; exit_code() keeps them 0.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let args = cli.command.args();
    let text = fsutil::read_to_string(&args.config)?;
    let mut config = RunConfig::from_toml(&text, &args.set, args.seed)?;
    let out_dir = resolve_out_dir(
        args.out.as_deref(),
        config.out_dir.as_deref(),
        std::env::var_os(OUT_DIR_ENV).map(PathBuf::from),
    );
    config.out_dir = Some(out_dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    // Freeze the fully resolved configuration first, so even a failed run
    // documents what it tried to do.
    fsutil::write_atomic(&out_dir.join("config.toml"), config.to_toml_string()?.as_bytes())?;
    match cli.command {
        Command::Train(_) => commands::cmd_train(&config, &out_dir),
        Command::Graph(_) => commands::cmd_graph(&config, &out_dir),
        Command::Eval(_) => commands::cmd_eval(&config, &out_dir),
        Command::Sweep(_) => commands::cmd_sweep(&config, &out_dir, args.jobs),
        Command::Attack(_) => commands::cmd_attack(&config, &out_dir),
    }
}

/// `--out` beats the config's `out_dir`, which beats the environment root.
fn resolve_out_dir(cli: Option<&Path>, config: Option<&Path>, env: Option<PathBuf>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or(env)
        .unwrap_or_else(|| PathBuf::from("great-out"))
}
