use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use krlm_cli::args::ConfigArgs;
use krlm_cli::commands::{self, SplitName};
use krlm_cli::{CliError, RunConfig};
use krlm_core::gradcheck::Instance;
use krlm_core::trainer::TrainMode;

#[derive(Debug, Parser)]
#[command(name = "krlm", version, about = "Knowledge-graph reasoning with a memory-augmented language model")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with the FB-V1 graph shape.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        synth_seed: u64,
    },
    /// Convert a GraIL-style inductive benchmark into the dataset layout.
    ImportGrail {
        /// Directory with the training graph (`train.txt`, `valid.txt`).
        #[arg(long)]
        train_dir: PathBuf,
        /// Directory with the test graph (`train.txt`, `test.txt`).
        #[arg(long)]
        test_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate and augment a dataset, build its relational graphs and the tokenizer.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train from scratch with the pretraining schedule.
    Pretrain(TrainArgs),
    /// Continue training from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        from: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train from scratch on one dataset.
    TrainE2e(TrainArgs),
    /// Rank every held-out query and write metrics, predictions and scores.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export attention traces of the last instruction token.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Trace file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Trace only this directed query.
        #[arg(long)]
        query: Option<usize>,
        /// Number of directed queries traced when `--query` is absent.
        #[arg(long, default_value_t = 10)]
        limit: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// encoders, attention, full-loss or all.
        #[arg(long, default_value = "all")]
        instance: String,
        #[arg(long = "check-seed", default_value_t = 1)]
        check_seed: u64,
    },
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[arg(long)]
    prepared: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let resolved = args.resolve()?;
    for w in &resolved.warnings {
        log::warn!("{w}");
    }
    Ok(resolved.config)
}

fn print_json(value: &impl serde::Serialize) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.into()))?);
    Ok(())
}

fn train(mode: TrainMode, args: &TrainArgs, source: Option<&PathBuf>) -> Result<(), CliError> {
    let config = resolve(&args.config)?;
    let summary = commands::train(mode, &args.prepared, &args.out, &config, source.map(|p| p.as_path()))?;
    print_json(&summary)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Synth { out, synth_seed } => {
            let hash = commands::synth(&out, synth_seed)?;
            println!("{} {hash}", out.display());
        }
        Cmd::ImportGrail { train_dir, test_dir, out } => {
            let hash = commands::import_grail(&train_dir, &test_dir, &out)?;
            println!("{} {hash}", out.display());
        }
        Cmd::Prepare { data, out, config } => {
            let config = resolve(&config)?;
            print_json(&commands::prepare(&data, &out, &config)?)?;
        }
        Cmd::Pretrain(args) => train(TrainMode::Pretrain, &args, None)?,
        Cmd::Finetune { from, train: args } => train(TrainMode::Finetune, &args, Some(&from))?,
        Cmd::TrainE2e(args) => train(TrainMode::E2e, &args, None)?,
        Cmd::Evaluate {
            checkpoint,
            prepared,
            split,
            out,
            config,
        } => {
            let config = resolve(&config)?;
            print_json(&commands::evaluate(&checkpoint, &prepared, split, &out, &config)?)?;
        }
        Cmd::Inspect {
            checkpoint,
            prepared,
            split,
            out,
            query,
            limit,
            config,
        } => {
            let config = resolve(&config)?;
            let n = commands::inspect(&checkpoint, &prepared, split, &out, query, limit, &config)?;
            println!("{n} trace lines written to {}", out.display());
        }
        Cmd::Gradcheck { instance, check_seed } => {
            let instances = if instance == "all" {
                Instance::ALL.to_vec()
            } else {
                vec![instance.parse::<Instance>()?]
            };
            let lines = commands::gradcheck(&instances, check_seed)?;
            for l in &lines {
                println!("{}", serde_json::to_string(l).map_err(|e| CliError::Other(e.into()))?);
            }
            if let Some(bad) = lines.iter().find(|l| !l.pass) {
                return Err(CliError::Numeric(format!(
                    "{} gradient relative error {:.3e} exceeds 1e-4",
                    bad.instance, bad.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("krlm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
