//! Stages of one sweep cell: a (seed, |T_in|) pair with its own directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use tariffshift_autodiff::derive_seed;

use super::config::ExperimentConfig;
use crate::allocator::{
    choose_profile, oracle_choose, pct_gain_vs_fc, realized_gain, write_gain_reports, GainReport, WholesaleOption,
};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::forecaster::{
    assemble_model, evaluate_aql, featurize, fit_normalization, load_checkpoint, predict_batch, save_checkpoint,
    train, write_loss_history, ForecastWindow, ModelVariant, Split, TrainedModel,
};
use crate::market::csv_io::{
    read_dataset, read_days, read_profiles, write_bias_report, write_dataset, write_days, write_profiles,
};
use crate::market::{
    bias_report, consumer_avg_profiles, curate_profiles_in, sample_consumer, sample_profiles_out, simulate,
    ConsumerSpec, SimDataset, TariffProfile, HOURS,
};

pub const IID: &str = "IID";
pub const OOD: &str = "OOD";
/// Method name of the hindsight-optimal allocation.
pub const ORACLE: &str = "Oracle";

/// File layout of one cell.
#[derive(Clone, Debug)]
pub struct CellPaths {
    pub dir: PathBuf,
}

impl CellPaths {
    pub fn new(root: &Path, seed: u64, t_in_size: usize) -> Self {
        CellPaths {
            dir: root.join(format!("seed-{seed}")).join(format!("tin-{t_in_size}")),
        }
    }

    pub fn profiles_in(&self) -> PathBuf {
        self.dir.join("profiles_in.csv")
    }
    pub fn profiles_out(&self) -> PathBuf {
        self.dir.join("profiles_out.csv")
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.csv")
    }
    pub fn days(&self) -> PathBuf {
        self.dir.join("days.csv")
    }
    pub fn bias(&self) -> PathBuf {
        self.dir.join("bias_report.csv")
    }
    /// Written last by the simulate stage.
    pub fn simulated_marker(&self) -> PathBuf {
        self.dir.join("simulated.ok")
    }
    pub fn model(&self, v: ModelVariant) -> PathBuf {
        self.dir.join("models").join(format!("{v}.json"))
    }
    pub fn loss_history(&self, v: ModelVariant) -> PathBuf {
        self.dir.join("models").join(format!("{v}_loss.csv"))
    }
    pub fn aql(&self) -> PathBuf {
        self.dir.join("aql.csv")
    }
    pub fn gains(&self) -> PathBuf {
        self.dir.join("gains.csv")
    }
    pub fn gain_summary(&self) -> PathBuf {
        self.dir.join("gain_summary.csv")
    }
    /// Wall-clock seconds a stage took, kept out of the CSV outputs because
    /// it differs between runs.
    pub fn timing(&self, stage: &str) -> PathBuf {
        self.dir.join("timing").join(format!("{stage}.secs"))
    }

    /// Sum of all recorded stage timings, if any were recorded.
    pub fn total_seconds(&self) -> Option<f64> {
        let entries = std::fs::read_dir(self.dir.join("timing")).ok()?;
        let secs: Vec<f64> = entries
            .filter_map(|e| std::fs::read_to_string(e.ok()?.path()).ok()?.trim().parse().ok())
            .collect();
        (!secs.is_empty()).then(|| secs.iter().sum())
    }
}

fn record_timing(paths: &CellPaths, stage: &str, started: Instant) -> Result<()> {
    let secs = started.elapsed().as_secs_f64();
    commit(&paths.timing(stage), |p| {
        std::fs::write(p, format!("{secs:.3}\n")).map_err(|e| Error::io(p, e))
    })
}

/// Writes through a temporary sibling and renames, so an interrupted run
/// never leaves a complete-looking file behind.
pub(crate) fn commit(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn consumers(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ConsumerSpec>> {
    (0..cfg.n_consumers)
        .map(|i| sample_consumer(&cfg.consumer_ranges, derive_seed(seed, &format!("consumer-spec/{i}"))))
        .collect()
}

/// Profile sets and simulated history of a cell, generated from the seed.
pub fn generate_cell(cfg: &ExperimentConfig, seed: u64, t_in_size: usize) -> Result<(SimDataset, Vec<TariffProfile>)> {
    let cs = consumers(cfg, seed)?;
    let sim_seed = derive_seed(seed, "simulate");
    let avg = consumer_avg_profiles(&cs, sim_seed);
    let t_in = curate_profiles_in(&avg, t_in_size, derive_seed(seed, &format!("t-in/{t_in_size}")))?;
    let t_out = sample_profiles_out(cfg.t_out_size, derive_seed(seed, &format!("t-out/{t_in_size}")), &t_in);
    let ds = simulate(&cs, &t_in, cfg.months, sim_seed)?;
    Ok((ds, t_out))
}

pub fn simulate_cell(cfg: &ExperimentConfig, seed: u64, t_in_size: usize) -> Result<()> {
    let paths = CellPaths::new(&cfg.output_dir, seed, t_in_size);
    if paths.simulated_marker().exists() {
        return Ok(());
    }
    if cfg.t_out_size == 0 {
        warn!("t_out_size is 0: OOD evaluation disabled for seed {seed}, |T_in| {t_in_size}");
    }
    let started = Instant::now();
    let (ds, t_out) = generate_cell(cfg, seed, t_in_size)?;
    commit(&paths.profiles_in(), |p| write_profiles(p, &ds.t_in))?;
    commit(&paths.profiles_out(), |p| write_profiles(p, &t_out))?;
    commit(&paths.dataset(), |p| write_dataset(p, &ds))?;
    commit(&paths.days(), |p| write_days(p, &ds))?;
    commit(&paths.bias(), |p| write_bias_report(p, &bias_report(&ds)?))?;
    record_timing(&paths, "simulate", started)?;
    std::fs::write(paths.simulated_marker(), "").map_err(|e| Error::io(paths.simulated_marker(), e))?;
    info!("simulated seed {seed}, |T_in| {t_in_size}");
    Ok(())
}

/// Everything the later stages read from a simulated cell.
pub struct CellData {
    pub paths: CellPaths,
    pub seed: u64,
    pub dataset: SimDataset,
    pub t_out: Vec<TariffProfile>,
    pub splits: [Split; 3],
}

impl CellData {
    pub fn load(cfg: &ExperimentConfig, seed: u64, t_in_size: usize) -> Result<Self> {
        let paths = CellPaths::new(&cfg.output_dir, seed, t_in_size);
        if !paths.simulated_marker().exists() {
            return Err(Error::Missing(paths.dataset()));
        }
        let t_in = read_profiles(&paths.profiles_in())?;
        let t_out = read_profiles(&paths.profiles_out())?;
        let mut dataset = read_dataset(&paths.dataset(), &t_in)?;
        read_days(&paths.days(), &mut dataset)?;
        Ok(CellData {
            paths,
            seed,
            dataset,
            t_out,
            splits: Split::from_months(cfg.split_months),
        })
    }

    pub fn windows(&self, cfg: &ExperimentConfig, split: usize) -> Result<Vec<ForecastWindow>> {
        let norms = fit_normalization(&self.dataset, self.splits[0])?;
        featurize(
            &self.dataset,
            self.splits[split],
            &norms,
            cfg.dims.lookback,
            cfg.dims.horizon,
            self.dataset.series.iter().all(|s| s.has_day_records()),
        )
    }

    /// Test windows with the future profile swapped for every profile in
    /// `profiles` and targets from the simulated response.
    pub fn counterfactual_windows(
        &self,
        model_norms: &TrainedModel,
        test: &[ForecastWindow],
        profiles: &[TariffProfile],
    ) -> Result<Vec<ForecastWindow>> {
        let mut out = Vec::with_capacity(test.len() * profiles.len());
        for w in test {
            let day = self.day_of(w)?;
            let norm = model_norms.norm_for(w.consumer_id)?;
            for p in profiles {
                out.push(w.with_profile(day, p, &norm)?);
            }
        }
        Ok(out)
    }

    fn day_of(&self, w: &ForecastWindow) -> Result<&crate::market::DayRecord> {
        let day = w
            .target_day()
            .ok_or_else(|| Error::Data("counterfactuals need day-aligned 24-hour windows".into()))?;
        self.dataset
            .series
            .iter()
            .find(|s| s.consumer_id == w.consumer_id)
            .and_then(|s| s.days.get(day))
            .ok_or_else(|| Error::Data(format!("no day record for consumer {} day {day}", w.consumer_id)))
    }
}

/// Seed used for initialization and batch order of every model in a cell.
fn model_seed(seed: u64) -> u64 {
    derive_seed(seed, "model")
}

pub fn train_variant(cfg: &ExperimentConfig, cell: &CellData, variant: ModelVariant) -> Result<TrainedModel> {
    let path = cell.paths.model(variant);
    if path.exists() {
        return load_checkpoint(&path);
    }
    let started = Instant::now();
    let train_w = cell.windows(cfg, 0)?;
    let val_w = cell.windows(cfg, 1)?;
    if variant.needs_shift_indicator() && train_w.iter().any(|w| w.future_shift_indicator.is_none()) {
        return Err(Error::Data(format!(
            "{variant} needs shift indicators; {} is missing",
            cell.paths.days().display()
        )));
    }
    let mut model = assemble_model(variant, &cfg.dims, model_seed(cell.seed))?;
    model.normalization = fit_normalization(&cell.dataset, cell.splits[0])?;
    let tc = crate::forecaster::TrainingConfig {
        seed: model_seed(cell.seed),
        ..cfg.training.clone()
    };
    let model = train(model, &train_w, &val_w, &tc)?;
    commit(&cell.paths.loss_history(variant), |p| write_loss_history(p, &model.loss_history))?;
    commit(&path, |p| save_checkpoint(p, &model))?;
    record_timing(&cell.paths, &format!("train-{variant}"), started)?;
    info!("trained {variant} for {}", cell.paths.dir.display());
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AqlRow {
    pub variant: ModelVariant,
    pub scenario: String,
    pub aql: f64,
}

/// Loads the checkpoints of `variants`; missing ones are returned by name.
pub fn load_models(cell: &CellData, variants: &[ModelVariant]) -> (Vec<TrainedModel>, Vec<PathBuf>) {
    let mut models = Vec::new();
    let mut missing = Vec::new();
    for &v in variants {
        match load_checkpoint(&cell.paths.model(v)) {
            Ok(m) => models.push(m),
            Err(_) => missing.push(cell.paths.model(v)),
        }
    }
    (models, missing)
}

pub fn evaluate_models(cfg: &ExperimentConfig, cell: &CellData, models: &[TrainedModel]) -> Result<Vec<AqlRow>> {
    let test = cell.windows(cfg, 2)?;
    let q = &cfg.training.eval_quantiles;
    let mut rows = Vec::new();
    for m in models {
        rows.push(AqlRow {
            variant: m.variant,
            scenario: IID.into(),
            aql: evaluate_aql(m, &test, q)?,
        });
        if !cell.t_out.is_empty() {
            let ood = cell.counterfactual_windows(m, &test, &cell.t_out)?;
            rows.push(AqlRow {
                variant: m.variant,
                scenario: OOD.into(),
                aql: evaluate_aql(m, &ood, q)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_aql(path: &Path, rows: &[AqlRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["variant", "scenario", "aql"]).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([r.variant.to_string(), r.scenario.clone(), fmt_f64(r.aql)])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_aql(path: &Path) -> Result<Vec<AqlRow>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        out.push(AqlRow {
            variant: rec[0].parse()?,
            scenario: rec[1].to_string(),
            aql: rec[2]
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad aql {:?}", path.display(), &rec[2])))?,
        });
    }
    Ok(out)
}

/// Candidate sets per scenario: the historical profiles, and those plus the
/// unseen ones.
pub fn scenarios(cell: &CellData) -> Vec<(&'static str, Vec<TariffProfile>)> {
    let mut out = vec![(IID, cell.dataset.t_in.clone())];
    if !cell.t_out.is_empty() {
        let mut all = cell.dataset.t_in.clone();
        all.extend(cell.t_out.iter().cloned());
        out.push((OOD, all));
    }
    out
}

/// Greedy allocation on every test day for each model, plus the hindsight
/// oracle, under each scenario and wholesale option.
pub fn allocate_models(cfg: &ExperimentConfig, cell: &CellData, models: &[TrainedModel]) -> Result<Vec<GainReport>> {
    let test = cell.windows(cfg, 2)?;
    let options: Vec<WholesaleOption> = cfg.wholesale.iter().map(|&t| WholesaleOption::from_tag(t)).collect();
    let mut rows = Vec::new();
    for (scenario, candidates) in scenarios(cell) {
        let mut medians: Vec<(String, Vec<[f64; HOURS]>)> = Vec::new();
        for m in models {
            let cf = cell.counterfactual_windows(m, &test, &candidates)?;
            let refs: Vec<&ForecastWindow> = cf.iter().collect();
            let preds = predict_batch(m, &refs, &[0.5])?;
            let med = preds
                .iter()
                .map(|rows| std::array::from_fn(|h| rows[h][0]))
                .collect();
            medians.push((m.variant.to_string(), med));
        }
        for (wi, w) in test.iter().enumerate() {
            let day = cell.day_of(w)?;
            for opt in &options {
                for (method, med) in &medians {
                    let base = wi * candidates.len();
                    let dec = choose_profile(&candidates, opt, |p| {
                        let ci = candidates.iter().position(|c| c.id == p.id).expect("candidate from list");
                        Ok(med[base + ci])
                    })?;
                    rows.push(GainReport {
                        consumer_id: w.consumer_id,
                        day_index: day.day_index,
                        method: method.clone(),
                        scenario: scenario.into(),
                        wholesale_option: opt.tag,
                        chosen_profile_id: dec.chosen.id.clone(),
                        estimated_gain: dec.estimated_gain,
                        realized_gain: realized_gain(day, &dec.chosen, opt),
                    });
                }
                let best = oracle_choose(day, &candidates, opt)?;
                let g = realized_gain(day, best, opt);
                rows.push(GainReport {
                    consumer_id: w.consumer_id,
                    day_index: day.day_index,
                    method: ORACLE.into(),
                    scenario: scenario.into(),
                    wholesale_option: opt.tag,
                    chosen_profile_id: best.id.clone(),
                    estimated_gain: g,
                    realized_gain: g,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainSummary {
    pub method: String,
    pub scenario: String,
    pub wholesale_option: crate::allocator::WholesaleTag,
    pub total_estimated: f64,
    pub total_realized: f64,
    pub pct_vs_fc: Option<f64>,
}

/// Totals per (method, scenario, option) with %gain over the FC method.
pub fn summarize_gains(rows: &[GainReport]) -> Vec<GainSummary> {
    let mut totals: BTreeMap<(String, String, crate::allocator::WholesaleTag, String), (f64, f64)> = BTreeMap::new();
    for r in rows {
        let e = totals
            .entry((r.scenario.clone(), r.wholesale_option.to_string(), r.wholesale_option, r.method.clone()))
            .or_default();
        e.0 += r.estimated_gain;
        e.1 += r.realized_gain;
    }
    let fc: BTreeMap<(String, crate::allocator::WholesaleTag), f64> = totals
        .iter()
        .filter(|(k, _)| k.3 == ModelVariant::FC.tag())
        .map(|(k, v)| ((k.0.clone(), k.2), v.1))
        .collect();
    totals
        .into_iter()
        .map(|((scenario, _, opt, method), (est, real))| GainSummary {
            pct_vs_fc: fc.get(&(scenario.clone(), opt)).and_then(|&f| pct_gain_vs_fc(real, f)),
            method,
            scenario,
            wholesale_option: opt,
            total_estimated: est,
            total_realized: real,
        })
        .collect()
}

pub fn write_gain_summary(path: &Path, rows: &[GainSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record([
        "method",
        "scenario",
        "wholesale_option",
        "total_estimated_gain",
        "total_realized_gain",
        "pct_gain_vs_fc_abs_denominator",
    ])
    .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.scenario.clone(),
            r.wholesale_option.to_string(),
            fmt_f64(r.total_estimated),
            fmt_f64(r.total_realized),
            r.pct_vs_fc.map(fmt_f64).unwrap_or_else(|| "undefined".into()),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gain_summary(path: &Path) -> Result<Vec<GainSummary>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("{}: bad number {:?}", path.display(), &rec[i])))
        };
        out.push(GainSummary {
            method: rec[0].to_string(),
            scenario: rec[1].to_string(),
            wholesale_option: rec[2].parse()?,
            total_estimated: num(3)?,
            total_realized: num(4)?,
            pct_vs_fc: if &rec[5] == "undefined" { None } else { Some(num(5)?) },
        });
    }
    Ok(out)
}

/// Runs evaluation for a cell and writes `aql.csv`. Returns the checkpoint
/// paths that were missing.
pub fn evaluate_cell(cfg: &ExperimentConfig, seed: u64, t_in_size: usize) -> Result<Vec<PathBuf>> {
    let cell = CellData::load(cfg, seed, t_in_size)?;
    if cell.paths.aql().exists() {
        let done = read_aql(&cell.paths.aql())?;
        if cfg.variants.iter().all(|v| done.iter().any(|r| r.variant == *v)) {
            return Ok(Vec::new());
        }
    }
    let started = Instant::now();
    let (models, missing) = load_models(&cell, &cfg.variants);
    let rows = evaluate_models(cfg, &cell, &models)?;
    if missing.is_empty() {
        commit(&cell.paths.aql(), |p| write_aql(p, &rows))?;
        record_timing(&cell.paths, "evaluate", started)?;
    } else {
        // partial results are written under a different name so a later
        // run with the missing models still recomputes the cell
        commit(&cell.dir_file("aql.partial.csv"), |p| write_aql(p, &rows))?;
    }
    Ok(missing)
}

pub fn allocate_cell(cfg: &ExperimentConfig, seed: u64, t_in_size: usize) -> Result<Vec<PathBuf>> {
    let cell = CellData::load(cfg, seed, t_in_size)?;
    if cell.paths.gain_summary().exists() {
        let done = read_gain_summary(&cell.paths.gain_summary())?;
        if cfg.variants.iter().all(|v| done.iter().any(|r| r.method == v.tag())) {
            return Ok(Vec::new());
        }
    }
    let started = Instant::now();
    let (models, missing) = load_models(&cell, &cfg.variants);
    let rows = allocate_models(cfg, &cell, &models)?;
    let summary = summarize_gains(&rows);
    let (gains, summ) = if missing.is_empty() {
        (cell.paths.gains(), cell.paths.gain_summary())
    } else {
        (cell.dir_file("gains.partial.csv"), cell.dir_file("gain_summary.partial.csv"))
    };
    commit(&gains, |p| write_gain_reports(p, &rows))?;
    commit(&summ, |p| write_gain_summary(p, &summary))?;
    if missing.is_empty() {
        record_timing(&cell.paths, "allocate", started)?;
    }
    Ok(missing)
}

impl CellData {
    fn dir_file(&self, name: &str) -> PathBuf {
        self.paths.dir.join(name)
    }
}
