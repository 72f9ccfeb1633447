use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use tariffshift::forecaster::ModelVariant;
use tariffshift::harness::{self, report, ExperimentConfig, Selection};

#[derive(Parser)]
#[command(name = "tariffshift", version, about = "Tariff-aware load forecasting and allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; fields not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured seed range.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run only this historical profile-set size.
    #[arg(long = "tin-size", global = true)]
    tin_size: Option<usize>,
    /// Run only this model variant.
    #[arg(long, global = true)]
    variant: Option<ModelVariant>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate consumers, profile sets and simulated datasets.
    Simulate,
    /// Train forecasters on the train split, selecting on validation.
    Train,
    /// Compute IID and OOD test AQL for trained models.
    Evaluate,
    /// Allocate profiles on test days and score realized gains.
    Allocate,
    /// Run every stage for every selected cell, then write the report.
    Sweep,
    /// Aggregate finished cells into plot-ready CSVs.
    Report,
}

fn run(cli: Cli) -> tariffshift::Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| tariffshift::Error::Io {
        path: cfg.output_dir.clone(),
        source: e,
    })?;
    let mut sel = Selection::all(&cfg);
    if let Some(s) = cli.seed {
        sel.seeds = vec![s];
    }
    if let Some(k) = cli.tin_size {
        sel.t_in_sizes = vec![k];
    }
    if let Some(v) = cli.variant {
        sel.variants = vec![v];
    }
    let fails = match cli.command {
        Command::Simulate => harness::cmd_simulate(&cfg, &sel),
        Command::Train => harness::cmd_train(&cfg, &sel),
        Command::Evaluate => harness::cmd_evaluate(&cfg, &sel),
        Command::Allocate => harness::cmd_allocate(&cfg, &sel),
        Command::Sweep => harness::cmd_sweep(&cfg, &sel),
        Command::Report => {
            let rows = report::write_report(&cfg)?;
            for (v, (pts, inv)) in report::ood_inversions(&rows) {
                let trend = if inv == 0 { "non-increasing" } else { "has inversions" };
                println!("{v}: OOD AQL over |T_in| {pts:?} {trend} ({inv})");
            }
            Vec::new()
        }
    };
    for f in &fails {
        error!("failed: {}: {}", f.job, f.error);
    }
    Ok(fails.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
