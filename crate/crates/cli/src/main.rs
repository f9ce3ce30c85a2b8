//! `divreg` experiment runner.
//!
//! ```text
//! divreg train-dnn --seed 1 epochs=50 train_subset=10000
//! divreg train-vae --config vae.conf --alpha 0.1
//! divreg gradcheck --seed 0
//! ```
//!
//! Every subcommand takes an optional config file, a seed, and overrides for
//! any config key, written `key=value` or `--key value` (`-` and `_` are
//! interchangeable in keys).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use divreg::config::{parse_override, ExperimentConfig, ExperimentKind};
use divreg::experiment::{self, DATA_DIR_ENV};
use divreg::parallel::{set_execution, Execution};

#[derive(Parser)]
#[command(name = "divreg", version, about = "Diversifying regularization experiments")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy RBM pretraining of a DBN followed by plain fine-tuning.
    PretrainDbn(RunArgs),
    /// Sigmoid classifier with layer-wise DR.
    TrainDnn(RunArgs),
    /// Variational autoencoder with reconstruction DR.
    TrainVae(RunArgs),
    /// Finite-difference checks of every analytic gradient; fails on any miss.
    Gradcheck(RunArgs),
    /// Cross-class pair counts of simulated uniform-label batches.
    PairsStats(RunArgs),
    /// Prints the resolved configuration without running anything.
    ShowConfig {
        kind: String,
        #[command(flatten)]
        args: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Seed for every random choice (required here or in the config).
    #[arg(long)]
    seed: Option<u64>,

    /// Config overrides: `key=value` or `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        let (k, v) = if let Some(flag) = tok.strip_prefix("--") {
            match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().with_context(|| format!("--{flag} needs a value"))?;
                    (flag.to_string(), v.clone())
                }
            }
        } else {
            parse_override(tok)?
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

fn resolve(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => String::new(),
    };
    let file_kind = text.lines().find_map(|l| {
        let (k, v) = l.split('#').next()?.split_once('=')?;
        (k.trim() == "kind").then(|| v.trim().to_string())
    });
    if let Some(file_kind) = file_kind {
        if file_kind != kind.name() {
            bail!("config file is for '{file_kind}', not '{kind}'");
        }
    }
    let mut overrides = vec![("kind".to_string(), kind.name().to_string())];
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.extend(parse_overrides(&args.overrides)?);
    Ok(ExperimentConfig::parse(&text, &overrides)?)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    if cli.sequential {
        set_execution(Execution::Sequential);
    }
    let (kind, args) = match &cli.command {
        Command::PretrainDbn(a) => (ExperimentKind::PretrainDbn, a),
        Command::TrainDnn(a) => (ExperimentKind::TrainDnn, a),
        Command::TrainVae(a) => (ExperimentKind::TrainVae, a),
        Command::Gradcheck(a) => (ExperimentKind::Gradcheck, a),
        Command::PairsStats(a) => (ExperimentKind::PairsStats, a),
        Command::ShowConfig { kind, args } => {
            let cfg = resolve(kind.parse()?, args)?;
            print!("{}", cfg.to_text());
            return Ok(ExitCode::SUCCESS);
        }
    };
    let cfg = resolve(kind, args)?;
    let report = experiment::run(&cfg).with_context(|| {
        format!(
            "{kind} failed (dataset root {}, set {DATA_DIR_ENV} to change it)",
            experiment::data_root().display()
        )
    })?;
    for line in &report.lines {
        println!("{line}");
    }
    if report.success {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("one or more checks exceeded tolerance");
        Ok(ExitCode::FAILURE)
    }
}
