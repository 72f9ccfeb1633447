//! Cross-cell aggregation into plot-ready tables.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::ExperimentConfig;
use super::pipeline::{commit, read_aql, read_gain_summary, CellPaths, OOD};
use crate::allocator::WholesaleTag;
use crate::error::{Error, Result};
use crate::fmt_f64;

/// One row per (|T_in|, variant, scenario, seed).
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub t_in_size: usize,
    pub variant: String,
    pub scenario: String,
    pub seed: u64,
    pub aql: Option<f64>,
    /// Total realized gain and %gain vs FC per wholesale option.
    pub gains: BTreeMap<WholesaleTag, (f64, Option<f64>)>,
}

type RowKey = (usize, String, String, u64);

fn row_entry<'a>(rows: &'a mut BTreeMap<RowKey, ResultRow>, k: usize, variant: &str, scenario: &str, seed: u64) -> &'a mut ResultRow {
    rows.entry((k, variant.to_string(), scenario.to_string(), seed))
        .or_insert_with(|| ResultRow {
            t_in_size: k,
            variant: variant.to_string(),
            scenario: scenario.to_string(),
            seed,
            aql: None,
            gains: BTreeMap::new(),
        })
}

/// Collects every finished cell's results; unfinished cells are skipped.
pub fn collect_results(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let mut rows: BTreeMap<RowKey, ResultRow> = BTreeMap::new();
    for &k in &cfg.t_in_sizes {
        for seed in cfg.seeds() {
            let paths = CellPaths::new(&cfg.output_dir, seed, k);
            if paths.aql().exists() {
                for r in read_aql(&paths.aql())? {
                    row_entry(&mut rows, k, r.variant.tag(), &r.scenario, seed).aql = Some(r.aql);
                }
            }
            if paths.gain_summary().exists() {
                for s in read_gain_summary(&paths.gain_summary())? {
                    row_entry(&mut rows, k, &s.method, &s.scenario, seed)
                        .gains
                        .insert(s.wholesale_option, (s.total_realized, s.pct_vs_fc));
                }
            }
        }
    }
    Ok(rows.into_values().collect())
}

pub fn write_results(path: &Path, rows: &[ResultRow], options: &[WholesaleTag]) -> Result<()> {
    commit(path, |p| {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::csv(p, e))?;
        let mut header: Vec<String> = ["t_in_size", "variant", "scenario", "seed", "aql"].map(String::from).to_vec();
        for o in options {
            header.push(format!("realized_gain_{o}"));
            header.push(format!("pct_gain_vs_fc_{o}"));
        }
        w.write_record(&header).map_err(|e| Error::csv(p, e))?;
        for r in rows {
            let mut rec = vec![
                r.t_in_size.to_string(),
                r.variant.clone(),
                r.scenario.clone(),
                r.seed.to_string(),
                r.aql.map(fmt_f64).unwrap_or_default(),
            ];
            for o in options {
                let g = r.gains.get(o);
                rec.push(g.map(|g| fmt_f64(g.0)).unwrap_or_default());
                rec.push(g.and_then(|g| g.1).map(fmt_f64).unwrap_or_default());
            }
            w.write_record(&rec).map_err(|e| Error::csv(p, e))?;
        }
        w.flush().map_err(|e| Error::io(p, e))
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Mean and spread of AQL over seeds per (|T_in|, variant, scenario).
pub fn aql_means(rows: &[ResultRow]) -> BTreeMap<(usize, String, String), (f64, f64, usize)> {
    let mut groups: BTreeMap<(usize, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(a) = r.aql {
            groups
                .entry((r.t_in_size, r.variant.clone(), r.scenario.clone()))
                .or_default()
                .push(a);
        }
    }
    groups
        .into_iter()
        .map(|(k, xs)| {
            let (m, s) = mean_std(&xs);
            (k, (m, s, xs.len()))
        })
        .collect()
}

/// Mean total gain and mean %gain vs FC over seeds per
/// (|T_in|, method, scenario, option).
pub fn gain_means(rows: &[ResultRow]) -> BTreeMap<(usize, String, String, WholesaleTag), (f64, Option<f64>, usize)> {
    let mut groups: BTreeMap<(usize, String, String, WholesaleTag), Vec<(f64, Option<f64>)>> = BTreeMap::new();
    for r in rows {
        for (&o, &g) in &r.gains {
            groups
                .entry((r.t_in_size, r.variant.clone(), r.scenario.clone(), o))
                .or_default()
                .push(g);
        }
    }
    groups
        .into_iter()
        .map(|(k, xs)| {
            let totals: Vec<f64> = xs.iter().map(|x| x.0).collect();
            let pcts: Option<Vec<f64>> = xs.iter().map(|x| x.1).collect();
            let pct = pcts.map(|p| mean_std(&p).0);
            (k, (mean_std(&totals).0, pct, xs.len()))
        })
        .collect()
}

/// Number of increases of mean OOD AQL along ascending |T_in| per variant.
pub fn ood_inversions(rows: &[ResultRow]) -> BTreeMap<String, (Vec<(usize, f64)>, usize)> {
    let means = aql_means(rows);
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for ((k, v, s), (m, _, _)) in means {
        if s == OOD {
            series.entry(v).or_default().push((k, m));
        }
    }
    series
        .into_iter()
        .map(|(v, pts)| {
            let inv = pts.windows(2).filter(|w| w[1].1 > w[0].1).count();
            (v, (pts, inv))
        })
        .collect()
}

/// Writes `results.csv`, `aql_vs_tin.csv`, `gain_vs_tin.csv` and
/// `aql_trend.csv` under the output directory.
pub fn write_report(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let rows = collect_results(cfg)?;
    let out = &cfg.output_dir;
    write_results(&out.join("results.csv"), &rows, &cfg.wholesale)?;
    commit(&out.join("aql_vs_tin.csv"), |p| {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::csv(p, e))?;
        w.write_record(["t_in_size", "variant", "scenario", "mean_aql", "std_aql", "n_seeds"])
            .map_err(|e| Error::csv(p, e))?;
        for ((k, v, s), (m, sd, n)) in aql_means(&rows) {
            w.write_record([k.to_string(), v, s, fmt_f64(m), fmt_f64(sd), n.to_string()])
                .map_err(|e| Error::csv(p, e))?;
        }
        w.flush().map_err(|e| Error::io(p, e))
    })?;
    commit(&out.join("gain_vs_tin.csv"), |p| {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::csv(p, e))?;
        w.write_record([
            "t_in_size",
            "method",
            "scenario",
            "wholesale_option",
            "mean_total_realized_gain",
            "mean_pct_gain_vs_fc",
            "n_seeds",
        ])
        .map_err(|e| Error::csv(p, e))?;
        for ((k, m, s, o), (g, pct, n)) in gain_means(&rows) {
            w.write_record([
                k.to_string(),
                m,
                s,
                o.to_string(),
                fmt_f64(g),
                pct.map(fmt_f64).unwrap_or_else(|| "undefined".into()),
                n.to_string(),
            ])
            .map_err(|e| Error::csv(p, e))?;
        }
        w.flush().map_err(|e| Error::io(p, e))
    })?;
    commit(&out.join("aql_trend.csv"), |p| {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::csv(p, e))?;
        w.write_record(["variant", "sizes", "inversions", "non_increasing"])
            .map_err(|e| Error::csv(p, e))?;
        for (v, (pts, inv)) in ood_inversions(&rows) {
            let sizes: Vec<String> = pts.iter().map(|(k, _)| k.to_string()).collect();
            w.write_record([v, sizes.join(" "), inv.to_string(), (inv == 0).to_string()])
                .map_err(|e| Error::csv(p, e))?;
        }
        w.flush().map_err(|e| Error::io(p, e))
    })?;
    Ok(rows)
}
