//! Greedy per-consumer tariff allocation and its evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{DayRecord, TariffProfile, HOURS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WholesaleTag {
    Option1,
    Option2,
}

impl fmt::Display for WholesaleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WholesaleTag::Option1 => "Option1",
            WholesaleTag::Option2 => "Option2",
        })
    }
}

impl FromStr for WholesaleTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Option1" => Ok(WholesaleTag::Option1),
            "Option2" => Ok(WholesaleTag::Option2),
            other => Err(Error::Config(format!("unknown wholesale option {other:?}"))),
        }
    }
}

/// Known-in-advance wholesale price for each hour of the next day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WholesaleOption {
    pub tag: WholesaleTag,
    pub prices: [f64; HOURS],
}

impl WholesaleOption {
    /// Two-level prices: 0.8 over hours 9-17, 0.2 otherwise.
    pub fn option1() -> Self {
        let prices = std::array::from_fn(|h| if (9..=17).contains(&h) { 0.8 } else { 0.2 });
        WholesaleOption {
            tag: WholesaleTag::Option1,
            prices,
        }
    }

    /// Option 1 with 0.5 shoulders at hours 7-8 and 18-19.
    pub fn option2() -> Self {
        let mut prices = Self::option1().prices;
        for h in [7, 8, 18, 19] {
            prices[h] = 0.5;
        }
        WholesaleOption {
            tag: WholesaleTag::Option2,
            prices,
        }
    }

    pub fn from_tag(tag: WholesaleTag) -> Self {
        match tag {
            WholesaleTag::Option1 => Self::option1(),
            WholesaleTag::Option2 => Self::option2(),
        }
    }

    /// Custom arrangement; every price must come from the option's value set.
    pub fn with_prices(tag: WholesaleTag, prices: [f64; HOURS]) -> Result<Self> {
        let allowed: &[f64] = match tag {
            WholesaleTag::Option1 => &[0.2, 0.8],
            WholesaleTag::Option2 => &[0.2, 0.5, 0.8],
        };
        if let Some(p) = prices.iter().find(|p| !allowed.contains(p)) {
            return Err(Error::Config(format!("price {p} not allowed for {tag}")));
        }
        Ok(WholesaleOption { tag, prices })
    }
}

/// Broker margin over a day: sum over hours of (rate - price) * load.
pub fn margin_gain(load: &[f64], rates: &[f64; HOURS], prices: &[f64; HOURS]) -> f64 {
    assert_eq!(load.len(), HOURS, "gain needs a 24-hour load");
    (0..HOURS).map(|h| (rates[h] - prices[h]) * load[h]).sum()
}

/// Estimated gain of a profile from a median forecast.
pub fn estimate_gain(forecast_median: &[f64], profile: &TariffProfile, wholesale: &WholesaleOption) -> f64 {
    margin_gain(forecast_median, &profile.rates(), &wholesale.prices)
}

/// Gain actually realized when `profile` is offered on the given day.
pub fn realized_gain(day: &DayRecord, profile: &TariffProfile, wholesale: &WholesaleOption) -> f64 {
    margin_gain(&day.counterfactual(profile), &profile.rates(), &wholesale.prices)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationDecision {
    pub chosen: TariffProfile,
    pub estimated_gain: f64,
    /// Estimated gain of every candidate, by profile id.
    pub candidate_gains: BTreeMap<String, f64>,
}

fn argmax_by_gain<'a>(
    candidates: &'a [TariffProfile],
    mut gain: impl FnMut(&TariffProfile) -> Result<f64>,
) -> Result<(&'a TariffProfile, f64, BTreeMap<String, f64>)> {
    let mut best: Option<(&TariffProfile, f64)> = None;
    let mut all = BTreeMap::new();
    for p in candidates {
        let g = gain(p)?;
        all.insert(p.id.clone(), g);
        best = match best {
            None => Some((p, g)),
            Some((bp, bg)) if g > bg || (g == bg && p.id < bp.id) => Some((p, g)),
            keep => keep,
        };
    }
    let (p, g) = best.ok_or_else(|| Error::Config("no candidate profiles to allocate".into()))?;
    Ok((p, g, all))
}

/// Greedy allocation: forecasts the median load under every candidate and
/// offers the one with the highest estimated gain (lowest id on ties).
pub fn choose_profile(
    candidates: &[TariffProfile],
    wholesale: &WholesaleOption,
    mut forecast_median: impl FnMut(&TariffProfile) -> Result<[f64; HOURS]>,
) -> Result<AllocationDecision> {
    let (chosen, estimated_gain, candidate_gains) =
        argmax_by_gain(candidates, |p| Ok(estimate_gain(&forecast_median(p)?, p, wholesale)))?;
    Ok(AllocationDecision {
        chosen: chosen.clone(),
        estimated_gain,
        candidate_gains,
    })
}

/// Best profile in hindsight for one consumer-day.
pub fn oracle_choose<'a>(
    day: &DayRecord,
    candidates: &'a [TariffProfile],
    wholesale: &WholesaleOption,
) -> Result<&'a TariffProfile> {
    argmax_by_gain(candidates, |p| Ok(realized_gain(day, p, wholesale))).map(|(p, _, _)| p)
}

/// Percent change of a method's total gain over the FC baseline, relative
/// to the baseline's magnitude. `None` when the baseline gain is zero.
pub fn pct_gain_vs_fc(method_total: f64, fc_total: f64) -> Option<f64> {
    (fc_total != 0.0).then(|| 100.0 * (method_total - fc_total) / fc_total.abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub consumer_id: usize,
    pub day_index: usize,
    pub method: String,
    pub scenario: String,
    pub wholesale_option: WholesaleTag,
    pub chosen_profile_id: String,
    pub estimated_gain: f64,
    pub realized_gain: f64,
}

const GAIN_HEADER: [&str; 8] = [
    "consumer_id",
    "day_index",
    "method",
    "scenario",
    "wholesale_option",
    "chosen_profile_id",
    "estimated_gain",
    "realized_gain",
];

pub fn write_gain_reports(path: &Path, rows: &[GainReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(GAIN_HEADER).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([
            r.consumer_id.to_string(),
            r.day_index.to_string(),
            r.method.clone(),
            r.scenario.clone(),
            r.wholesale_option.to_string(),
            r.chosen_profile_id.clone(),
            crate::fmt_f64(r.estimated_gain),
            crate::fmt_f64(r.realized_gain),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gain_reports(path: &Path) -> Result<Vec<GainReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad = |what: &str| Error::Data(format!("{}: bad {what} in row {}", path.display(), out.len() + 1));
        out.push(GainReport {
            consumer_id: field(0).parse().map_err(|_| bad("consumer_id"))?,
            day_index: field(1).parse().map_err(|_| bad("day_index"))?,
            method: field(2).to_string(),
            scenario: field(3).to_string(),
            wholesale_option: field(4).parse()?,
            chosen_profile_id: field(5).to_string(),
            estimated_gain: field(6).parse().map_err(|_| bad("estimated_gain"))?,
            realized_gain: field(7).parse().map_err(|_| bad("realized_gain"))?,
        });
    }
    Ok(out)
}
