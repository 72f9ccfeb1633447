//! Sliding forecast windows over simulated series.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Calendar, ConsumerSeries, DayRecord, SimDataset, TariffProfile, DAYS_PER_MONTH, HOURS};

/// Standard deviations below this are clamped when normalizing.
pub const STD_FLOOR: f64 = 1e-6;
/// Stride between consecutive windows.
pub const WINDOW_SHIFT: usize = 24;

/// Day range `[start_day, end_day)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub start_day: usize,
    pub end_day: usize,
}

impl Split {
    pub fn days(&self) -> usize {
        self.end_day - self.start_day
    }

    /// Consecutive train/validation/test splits from month counts.
    pub fn from_months(months: (usize, usize, usize)) -> [Split; 3] {
        let a = months.0 * DAYS_PER_MONTH;
        let b = a + months.1 * DAYS_PER_MONTH;
        let c = b + months.2 * DAYS_PER_MONTH;
        [
            Split { start_day: 0, end_day: a },
            Split { start_day: a, end_day: b },
            Split { start_day: b, end_day: c },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("normalization over an empty series".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Normalization {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Per-consumer statistics of the given split's consumption.
pub fn fit_normalization(ds: &SimDataset, split: Split) -> Result<BTreeMap<usize, Normalization>> {
    ds.series
        .iter()
        .map(|s| {
            let hours = s.consumption.get(split.start_day * HOURS..split.end_day * HOURS).ok_or_else(|| {
                Error::Data(format!("consumer {} has no days {}..{}", s.consumer_id, split.start_day, split.end_day))
            })?;
            Ok((s.consumer_id, Normalization::fit(hours)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastWindow {
    pub consumer_id: usize,
    /// Hour index of the first forecast hour.
    pub target_start: usize,
    pub past_consumption: Vec<f64>,
    pub past_tariffs: Vec<f64>,
    pub past_calendar: Vec<Calendar>,
    pub future_tariffs: Vec<f64>,
    pub future_calendar: Vec<Calendar>,
    pub future_shift_indicator: Option<Vec<f64>>,
    pub target: Vec<f64>,
}

impl ForecastWindow {
    pub fn lookback(&self) -> usize {
        self.past_consumption.len()
    }

    pub fn horizon(&self) -> usize {
        self.future_tariffs.len()
    }

    /// Day of the forecast when the horizon is exactly one aligned day.
    pub fn target_day(&self) -> Option<usize> {
        (self.horizon() == HOURS && self.target_start % HOURS == 0).then_some(self.target_start / HOURS)
    }

    /// The same window with the future profile replaced and targets taken
    /// from the consumer's simulated response to it.
    pub fn with_profile(&self, day: &DayRecord, profile: &TariffProfile, norm: &Normalization) -> Result<Self> {
        if self.target_day() != Some(day.day_index) {
            return Err(Error::Data(format!(
                "window at hour {} does not forecast day {}",
                self.target_start, day.day_index
            )));
        }
        let (load, block) = day.respond(profile);
        let mut w = self.clone();
        w.future_tariffs = profile.rates().to_vec();
        w.target = load.iter().map(|&v| norm.apply(v)).collect();
        if w.future_shift_indicator.is_some() {
            w.future_shift_indicator = Some(indicator(block, HOURS, 0));
        }
        Ok(w)
    }
}

fn indicator(block: Option<usize>, len: usize, offset: usize) -> Vec<f64> {
    (0..len).map(|i| if block == Some(offset + i) { 1.0 } else { 0.0 }).collect()
}

fn block_indicator(s: &ConsumerSeries, start: usize, len: usize) -> Result<Vec<f64>> {
    (start..start + len)
        .map(|i| {
            let day = s.days.get(i / HOURS).ok_or_else(|| {
                Error::Data(format!("consumer {}: shift indicators need day records", s.consumer_id))
            })?;
            Ok(if day.block_hour() == Some(i % HOURS) { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Windows of `lookback` past hours and `horizon` future hours, stepping
/// by one day, kept entirely inside `split`. Shift indicators are attached
/// when `with_indicator` is set.
pub fn featurize(
    ds: &SimDataset,
    split: Split,
    norms: &BTreeMap<usize, Normalization>,
    lookback: usize,
    horizon: usize,
    with_indicator: bool,
) -> Result<Vec<ForecastWindow>> {
    let (lo, hi) = (split.start_day * HOURS, split.end_day * HOURS);
    if hi < lo + lookback + horizon {
        return Err(Error::Data(format!(
            "split of {} hours is shorter than one {lookback}+{horizon} hour window",
            hi.saturating_sub(lo)
        )));
    }
    let mut out = Vec::new();
    for s in &ds.series {
        if s.consumption.len() < hi {
            return Err(Error::Data(format!("consumer {} series ends before the split", s.consumer_id)));
        }
        let norm = norms
            .get(&s.consumer_id)
            .ok_or_else(|| Error::Data(format!("no normalization for consumer {}", s.consumer_id)))?;
        let mut start = lo;
        while start + lookback + horizon <= hi {
            let t = start + lookback;
            out.push(ForecastWindow {
                consumer_id: s.consumer_id,
                target_start: t,
                past_consumption: s.consumption[start..t].iter().map(|&v| norm.apply(v)).collect(),
                past_tariffs: s.tariff[start..t].to_vec(),
                past_calendar: (start..t).map(Calendar::at).collect(),
                future_tariffs: s.tariff[t..t + horizon].to_vec(),
                future_calendar: (t..t + horizon).map(Calendar::at).collect(),
                future_shift_indicator: if with_indicator {
                    Some(block_indicator(s, t, horizon)?)
                } else {
                    None
                },
                target: s.consumption[t..t + horizon].iter().map(|&v| norm.apply(v)).collect(),
            });
            start += WINDOW_SHIFT;
        }
    }
    Ok(out)
}
