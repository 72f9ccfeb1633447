//! Experiment orchestration: per-cell stages, sweeps and reports.

pub mod config;
pub mod pipeline;
pub mod report;

use std::path::PathBuf;

use log::{error, info};
use rayon::prelude::*;

pub use config::ExperimentConfig;
pub use pipeline::{CellData, CellPaths, IID, OOD, ORACLE};

use crate::error::{Error, Result};
use crate::forecaster::ModelVariant;

/// Environment variable bounding the number of concurrent cell jobs.
pub const WORKERS_ENV: &str = "TARIFFSHIFT_WORKERS";

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// A failed job and why.
#[derive(Debug)]
pub struct Failure {
    pub job: String,
    pub error: Error,
}

/// Selection of cells and variants a command acts on.
#[derive(Clone, Debug)]
pub struct Selection {
    pub seeds: Vec<u64>,
    pub t_in_sizes: Vec<usize>,
    pub variants: Vec<ModelVariant>,
}

impl Selection {
    pub fn all(cfg: &ExperimentConfig) -> Self {
        Selection {
            seeds: cfg.seeds(),
            t_in_sizes: cfg.t_in_sizes.clone(),
            variants: cfg.variants.clone(),
        }
    }

    fn cells(&self) -> Vec<(u64, usize)> {
        let mut out = Vec::new();
        for &k in &self.t_in_sizes {
            for &s in &self.seeds {
                out.push((s, k));
            }
        }
        out
    }
}

fn run_jobs<J, F>(jobs: Vec<J>, name: impl Fn(&J) -> String + Sync, f: F) -> Vec<Failure>
where
    J: Send + Sync,
    F: Fn(&J) -> Result<Vec<PathBuf>> + Sync + Send,
{
    let work = || -> Vec<Failure> {
        jobs.par_iter()
            .flat_map_iter(|j| {
                let job = name(j);
                let mut fails = Vec::new();
                match f(j) {
                    Ok(missing) => {
                        for m in missing {
                            error!("{job}: missing {}", m.display());
                            fails.push(Failure {
                                job: job.clone(),
                                error: Error::Missing(m),
                            });
                        }
                    }
                    Err(e) => {
                        error!("{job}: {e}");
                        fails.push(Failure { job, error: e });
                    }
                }
                fails
            })
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(worker_count()).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    }
}

fn cell_name(&(s, k): &(u64, usize)) -> String {
    format!("seed {s} |T_in| {k}")
}

pub fn cmd_simulate(cfg: &ExperimentConfig, sel: &Selection) -> Vec<Failure> {
    run_jobs(sel.cells(), cell_name, |&(s, k)| {
        pipeline::simulate_cell(cfg, s, k).map(|_| Vec::new())
    })
}

pub fn cmd_train(cfg: &ExperimentConfig, sel: &Selection) -> Vec<Failure> {
    let mut jobs = Vec::new();
    for cell in sel.cells() {
        for &v in &sel.variants {
            jobs.push((cell, v));
        }
    }
    run_jobs(
        jobs,
        |(c, v)| format!("{} {v}", cell_name(c)),
        |&((s, k), v)| {
            let data = CellData::load(cfg, s, k)?;
            pipeline::train_variant(cfg, &data, v).map(|_| Vec::new())
        },
    )
}

fn with_variants(cfg: &ExperimentConfig, sel: &Selection) -> ExperimentConfig {
    ExperimentConfig {
        variants: sel.variants.clone(),
        ..cfg.clone()
    }
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, sel: &Selection) -> Vec<Failure> {
    let cfg = with_variants(cfg, sel);
    run_jobs(sel.cells(), cell_name, |&(s, k)| pipeline::evaluate_cell(&cfg, s, k))
}

pub fn cmd_allocate(cfg: &ExperimentConfig, sel: &Selection) -> Vec<Failure> {
    let cfg = with_variants(cfg, sel);
    run_jobs(sel.cells(), cell_name, |&(s, k)| pipeline::allocate_cell(&cfg, s, k))
}

/// Full pipeline over the selection. Completed files are reused, so an
/// interrupted sweep resumes where it stopped.
pub fn cmd_sweep(cfg: &ExperimentConfig, sel: &Selection) -> Vec<Failure> {
    let mut fails = cmd_simulate(cfg, sel);
    fails.extend(cmd_train(cfg, sel));
    fails.extend(cmd_evaluate(cfg, sel));
    fails.extend(cmd_allocate(cfg, sel));
    match report::write_report(cfg) {
        Ok(rows) => info!("report: {} result rows", rows.len()),
        Err(e) => fails.push(Failure {
            job: "report".into(),
            error: e,
        }),
    }
    fails
}
