//! Bit-exact CSV persistence for datasets and profile sets.

use std::path::Path;

use super::sim::{Calendar, ConsumerSeries, DayRecord, SimDataset};
use super::tariff::{TariffProfile, HOURS};
use crate::allocator::WholesaleOption;
use crate::error::{Error, Result};
use crate::fmt_f64;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))
}

fn parse<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
        let line = rec.position().map_or(0, |p| p.line());
        Error::Data(format!("{}:{line}: bad {what}", path.display()))
    })
}

pub fn write_profiles(path: &Path, profiles: &[TariffProfile]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["profile_id".to_string()];
    header.extend((0..HOURS).map(|h| format!("r{h}")));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for p in profiles {
        let mut row = vec![p.id.clone()];
        row.extend(p.rates().iter().map(|&r| fmt_f64(r)));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_profiles(path: &Path) -> Result<Vec<TariffProfile>> {
    let mut r = reader(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != HOURS + 1 {
            return Err(Error::Data(format!("{}: profile row with {} fields", path.display(), rec.len())));
        }
        let rates = (1..=HOURS)
            .map(|i| parse::<f64>(path, &rec, i, "rate"))
            .collect::<Result<Vec<_>>>()?;
        out.push(TariffProfile::from_rates(&rec[0], &rates)?);
    }
    Ok(out)
}

const DATASET_HEADER: [&str; 8] = [
    "consumer_id",
    "hour_index",
    "consumption_kwh",
    "tariff_rate",
    "profile_id",
    "hour_of_day",
    "day_of_week",
    "month",
];

/// Writes the hourly series of every consumer.
pub fn write_dataset(path: &Path, ds: &SimDataset) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(DATASET_HEADER).map_err(|e| Error::csv(path, e))?;
    for s in &ds.series {
        for (i, (&c, &r)) in s.consumption.iter().zip(&s.tariff).enumerate() {
            let cal = Calendar::at(i);
            w.write_record([
                s.consumer_id.to_string(),
                i.to_string(),
                fmt_f64(c),
                fmt_f64(r),
                s.profile_ids[i / HOURS].clone(),
                cal.hour_of_day.to_string(),
                cal.day_of_week.to_string(),
                cal.month.to_string(),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an hourly dataset; day records are left empty (see [`read_days`]).
pub fn read_dataset(path: &Path, t_in: &[TariffProfile]) -> Result<SimDataset> {
    let mut r = reader(path)?;
    let mut series: Vec<ConsumerSeries> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let consumer: usize = parse(path, &rec, 0, "consumer_id")?;
        let hour: usize = parse(path, &rec, 1, "hour_index")?;
        if series.last().map(|s| s.consumer_id) != Some(consumer) {
            series.push(ConsumerSeries {
                consumer_id: consumer,
                consumption: Vec::new(),
                tariff: Vec::new(),
                profile_ids: Vec::new(),
                days: Vec::new(),
            });
        }
        let s = series.last_mut().expect("pushed above");
        if hour != s.consumption.len() {
            return Err(Error::Data(format!(
                "{}: consumer {consumer} jumps to hour {hour}",
                path.display()
            )));
        }
        let cal = Calendar {
            hour_of_day: parse(path, &rec, 5, "hour_of_day")?,
            day_of_week: parse(path, &rec, 6, "day_of_week")?,
            month: parse(path, &rec, 7, "month")?,
        };
        if cal != Calendar::at(hour) {
            return Err(Error::Data(format!("{}: calendar mismatch at hour {hour}", path.display())));
        }
        s.consumption.push(parse(path, &rec, 2, "consumption_kwh")?);
        s.tariff.push(parse(path, &rec, 3, "tariff_rate")?);
        if hour % HOURS == 0 {
            s.profile_ids.push(rec[4].to_string());
        } else if s.profile_ids.last().map(String::as_str) != Some(&rec[4]) {
            return Err(Error::Data(format!("{}: profile changes within a day at hour {hour}", path.display())));
        }
    }
    let days = series.first().map_or(0, ConsumerSeries::num_days);
    let daily = WholesaleOption::option1().prices;
    let ds = SimDataset {
        t_in: t_in.to_vec(),
        series,
        wholesale: (0..days * HOURS).map(|i| daily[i % HOURS]).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the per-day records needed for counterfactual targets.
pub fn write_days(path: &Path, ds: &SimDataset) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["consumer_id", "day_index", "preferred_hour", "shiftable_kwh", "shift_target"]
        .map(String::from)
        .to_vec();
    header.extend((0..HOURS).map(|h| format!("base{h}")));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for s in &ds.series {
        for d in &s.days {
            let mut row = vec![
                s.consumer_id.to_string(),
                d.day_index.to_string(),
                d.preferred_hour.to_string(),
                fmt_f64(d.shiftable_kwh),
                d.shift_target.map(|h| h.to_string()).unwrap_or_default(),
            ];
            row.extend(d.base_load.iter().map(|&v| fmt_f64(v)));
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Attaches day records to a dataset read by [`read_dataset`]. Total loads
/// and profile ids come from the hourly series.
pub fn read_days(path: &Path, ds: &mut SimDataset) -> Result<()> {
    let mut r = reader(path)?;
    for s in &mut ds.series {
        s.days.clear();
    }
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 5 + HOURS {
            return Err(Error::Data(format!("{}: day row with {} fields", path.display(), rec.len())));
        }
        let consumer: usize = parse(path, &rec, 0, "consumer_id")?;
        let day: usize = parse(path, &rec, 1, "day_index")?;
        let s = ds
            .series
            .iter_mut()
            .find(|s| s.consumer_id == consumer)
            .ok_or_else(|| Error::Data(format!("{}: unknown consumer {consumer}", path.display())))?;
        if day != s.days.len() || day >= s.num_days() {
            return Err(Error::Data(format!("{}: consumer {consumer} day {day} out of order", path.display())));
        }
        let mut base = [0.0; HOURS];
        for (h, b) in base.iter_mut().enumerate() {
            *b = parse(path, &rec, 5 + h, "base load")?;
        }
        let shift_target = match &rec[4] {
            "" => None,
            v => Some(v.parse().map_err(|_| Error::Data(format!("{}: bad shift_target", path.display())))?),
        };
        s.days.push(DayRecord {
            day_index: day,
            base_load: base,
            preferred_hour: parse(path, &rec, 2, "preferred_hour")?,
            shiftable_kwh: parse(path, &rec, 3, "shiftable_kwh")?,
            shift_target,
            total_load: s.consumption[day * HOURS..(day + 1) * HOURS].try_into().expect("24 hours"),
            profile_id: s.profile_ids[day].clone(),
        });
    }
    if let Some(s) = ds.series.iter().find(|s| s.days.len() != s.num_days()) {
        return Err(Error::Data(format!(
            "{}: consumer {} has {} of {} day records",
            path.display(),
            s.consumer_id,
            s.days.len(),
            s.num_days()
        )));
    }
    Ok(())
}

pub fn write_bias_report(path: &Path, table: &[[f64; 3]; HOURS]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["hour", "low", "medium", "high"]).map_err(|e| Error::csv(path, e))?;
    for (h, row) in table.iter().enumerate() {
        w.write_record([h.to_string(), fmt_f64(row[0]), fmt_f64(row[1]), fmt_f64(row[2])])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
