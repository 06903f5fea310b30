//! `bgm`: generate synthetic data, train structured networks, answer
//! counterfactual queries and run diagnostics.
//!
//! Exit codes: 0 success, 2 invalid input, 3 training divergence,
//! 4 failed diagnostic check.

use std::path::PathBuf;
use std::process::ExitCode;

use bgm::experiment::{
    cmd_counterfactual, cmd_diagnose, cmd_eval_abr, cmd_eval_ellipse, cmd_generate, cmd_train, ExperimentConfig,
    RunError,
};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bgm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Result directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for data, initialization and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `key.path=value`, applied in order after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Sample the configured dataset to `data.csv` plus a JSON sidecar.
    Generate,
    /// Train the configured structure.
    Train,
    /// Answer the query file named by `query`.
    Counterfactual,
    /// Angle-sweep MAPE of the model and both single-flow references.
    EvalEllipse,
    /// Normalized MSE of throughput counterfactuals against replay.
    EvalAbr,
    /// Monotonicity and independence checks of a trained model.
    Diagnose,
}

fn config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf), RunError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| bgm::Error::InvalidArgument("no result directory: pass --out or set `out`".into()))?;
    cfg.validate()?;
    Ok((cfg, out))
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<(), RunError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(bgm::Error::from)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), RunError> {
    let (cfg, out) = config(cli)?;
    match cli.command {
        Command::Generate => println!("{}", cmd_generate(&cfg, &out)?.display()),
        Command::Train => print_json(&cmd_train(&cfg, &out)?.1)?,
        Command::Counterfactual => println!("{}", cmd_counterfactual(&cfg, &out)?.display()),
        Command::EvalEllipse => print_json(&cmd_eval_ellipse(&cfg, &out)?)?,
        Command::EvalAbr => print_json(&cmd_eval_abr(&cfg, &out)?)?,
        Command::Diagnose => print_json(&cmd_diagnose(&cfg, &out)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
