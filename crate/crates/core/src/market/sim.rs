use serde::{Deserialize, Serialize};
use tariffshift_autodiff::derive_seed;

use super::consumer::{base_load_day, respond_to_tariff, ConsumerSpec};
use super::tariff::{policy_allocate, Rate, TariffProfile, HOURS};
use crate::allocator::WholesaleOption;
use crate::error::{Error, Result};

pub const DAYS_PER_MONTH: usize = 30;
/// Days of flat-tariff history simulated before day 0.
pub const WARMUP_DAYS: usize = 28;
/// Trailing window of the allocation heuristic.
pub const POLICY_WINDOW_DAYS: usize = 7;

/// Calendar features of one hour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Calendar {
    pub hour_of_day: usize,
    pub day_of_week: usize,
    pub month: usize,
}

impl Calendar {
    pub const HOURS_OF_DAY: usize = 24;
    pub const DAYS_OF_WEEK: usize = 7;
    pub const MONTHS: usize = 12;

    /// Calendar of the `hour_index`-th hour counted from the start of day 0.
    pub fn at(hour_index: usize) -> Calendar {
        let day = hour_index / HOURS;
        Calendar {
            hour_of_day: hour_index % HOURS,
            day_of_week: day % 7,
            month: (day / DAYS_PER_MONTH) % 12,
        }
    }
}

/// One simulated day of one consumer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day_index: usize,
    pub base_load: [f64; HOURS],
    pub preferred_hour: usize,
    /// Shiftable energy scheduled that day; zero on non-working days.
    pub shiftable_kwh: f64,
    pub shift_target: Option<usize>,
    pub total_load: [f64; HOURS],
    pub profile_id: String,
}

impl DayRecord {
    /// Consumption the same day would have shown under another profile.
    pub fn counterfactual(&self, profile: &TariffProfile) -> [f64; HOURS] {
        self.respond(profile).0
    }

    /// Counterfactual load plus the hour the block lands in (if any).
    pub fn respond(&self, profile: &TariffProfile) -> ([f64; HOURS], Option<usize>) {
        let r = respond_to_tariff(&self.base_load, self.shiftable_kwh, self.preferred_hour, &profile.rates());
        let load: [f64; HOURS] = r.total_load.try_into().expect("24 hours");
        let block = (self.shiftable_kwh > 0.0).then_some(r.block_hour);
        (load, block)
    }

    /// Hour the shiftable block actually ran, if any ran.
    pub fn block_hour(&self) -> Option<usize> {
        (self.shiftable_kwh > 0.0).then(|| self.shift_target.unwrap_or(self.preferred_hour))
    }
}

/// Hourly history of one consumer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsumerSeries {
    pub consumer_id: usize,
    pub consumption: Vec<f64>,
    pub tariff: Vec<f64>,
    /// Allocated profile per day.
    pub profile_ids: Vec<String>,
    /// Per-day records; empty when the series was read from an hourly file
    /// without its day records.
    pub days: Vec<DayRecord>,
}

impl ConsumerSeries {
    pub fn num_days(&self) -> usize {
        self.profile_ids.len()
    }

    pub fn has_day_records(&self) -> bool {
        !self.days.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimDataset {
    pub t_in: Vec<TariffProfile>,
    pub series: Vec<ConsumerSeries>,
    /// Wholesale price for every hour of the horizon.
    pub wholesale: Vec<f64>,
}

impl SimDataset {
    pub fn num_days(&self) -> usize {
        self.series.first().map_or(0, ConsumerSeries::num_days)
    }

    pub fn profile(&self, id: &str) -> Option<&TariffProfile> {
        self.t_in.iter().find(|p| p.id == id)
    }

    /// Checks structural invariants: contiguous hourly series and profile ids
    /// that resolve in the historical set.
    pub fn validate(&self) -> Result<()> {
        for s in &self.series {
            let days = s.num_days();
            if s.consumption.len() != days * HOURS || s.tariff.len() != days * HOURS {
                return Err(Error::Data(format!(
                    "consumer {}: {} hours for {days} days",
                    s.consumer_id,
                    s.consumption.len()
                )));
            }
            for (d, id) in s.profile_ids.iter().enumerate() {
                let p = self
                    .profile(id)
                    .ok_or_else(|| Error::Data(format!("consumer {}: unknown profile {id}", s.consumer_id)))?;
                if s.tariff[d * HOURS..(d + 1) * HOURS] != p.rates() {
                    return Err(Error::Data(format!(
                        "consumer {} day {d}: tariff does not match profile {id}",
                        s.consumer_id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn consumer_seed(seed: u64, consumer: usize) -> u64 {
    derive_seed(seed, &format!("consumer/{consumer}"))
}

/// Flat medium-tariff days preceding day 0, oldest first.
fn warmup_loads(spec: &ConsumerSpec, seed: u64) -> Vec<[f64; HOURS]> {
    let flat = [Rate::Medium.value(); HOURS];
    (0..WARMUP_DAYS)
        .map(|j| {
            let day = j as i64 - WARMUP_DAYS as i64;
            let base = base_load_day(spec, day, seed);
            let r = respond_to_tariff(&base, spec.shiftable_on(day), spec.preferred_hour(), &flat);
            r.total_load.try_into().expect("24 hours")
        })
        .collect()
}

fn mean_day(days: &[[f64; HOURS]]) -> [f64; HOURS] {
    let n = days.len().max(1) as f64;
    std::array::from_fn(|h| days.iter().map(|d| d[h]).sum::<f64>() / n)
}

/// Average daily load curve of every consumer over the warm-up history,
/// which is what the historical profiles are curated from.
pub fn consumer_avg_profiles(consumers: &[ConsumerSpec], seed: u64) -> Vec<[f64; HOURS]> {
    consumers
        .iter()
        .enumerate()
        .map(|(c, spec)| mean_day(&warmup_loads(spec, consumer_seed(seed, c))))
        .collect()
}

/// Simulates `months` of daily allocation and response. Each evening the
/// heuristic allocates tomorrow's profile from the trailing week of load;
/// the consumer then reacts to it.
pub fn simulate(consumers: &[ConsumerSpec], t_in: &[TariffProfile], months: usize, seed: u64) -> Result<SimDataset> {
    if months == 0 {
        return Err(Error::Config("simulation needs at least one month".into()));
    }
    if t_in.is_empty() {
        return Err(Error::Config("simulation needs at least one historical profile".into()));
    }
    let days = months * DAYS_PER_MONTH;
    let series = consumers
        .iter()
        .enumerate()
        .map(|(c, spec)| simulate_consumer(c, spec, t_in, days, consumer_seed(seed, c)))
        .collect::<Result<Vec<_>>>()?;
    let daily = WholesaleOption::option1().prices;
    let wholesale = (0..days * HOURS).map(|i| daily[i % HOURS]).collect();
    Ok(SimDataset {
        t_in: t_in.to_vec(),
        series,
        wholesale,
    })
}

fn simulate_consumer(
    consumer_id: usize,
    spec: &ConsumerSpec,
    t_in: &[TariffProfile],
    days: usize,
    seed: u64,
) -> Result<ConsumerSeries> {
    let mut history = warmup_loads(spec, seed);
    let mut out = ConsumerSeries {
        consumer_id,
        consumption: Vec::with_capacity(days * HOURS),
        tariff: Vec::with_capacity(days * HOURS),
        profile_ids: Vec::with_capacity(days),
        days: Vec::with_capacity(days),
    };
    for d in 0..days {
        let recent = mean_day(&history[history.len() - POLICY_WINDOW_DAYS..]);
        let profile = policy_allocate(&recent, t_in)?;
        let base = base_load_day(spec, d as i64, seed);
        let shiftable = spec.shiftable_on(d as i64);
        let r = respond_to_tariff(&base, shiftable, spec.preferred_hour(), &profile.rates());
        let total: [f64; HOURS] = r.total_load.try_into().expect("24 hours");
        out.consumption.extend_from_slice(&total);
        out.tariff.extend_from_slice(&profile.rates());
        out.profile_ids.push(profile.id.clone());
        out.days.push(DayRecord {
            day_index: d,
            base_load: base,
            preferred_hour: spec.preferred_hour(),
            shiftable_kwh: shiftable,
            shift_target: if shiftable > 0.0 { r.shift_target } else { None },
            total_load: total,
            profile_id: profile.id.clone(),
        });
        history.push(total);
    }
    Ok(out)
}

/// Empirical frequency of each rate level at each hour over all allocated
/// days; rows are hours, columns are low/medium/high.
pub fn bias_report(dataset: &SimDataset) -> Result<[[f64; 3]; HOURS]> {
    let mut counts = [[0usize; 3]; HOURS];
    let mut days = 0usize;
    for s in &dataset.series {
        for (i, &r) in s.tariff.iter().enumerate() {
            let level = Rate::from_value(r).ok_or_else(|| Error::Data(format!("tariff value {r}")))?;
            counts[i % HOURS][level.index()] += 1;
        }
        days += s.tariff.len() / HOURS;
    }
    if days == 0 {
        return Err(Error::Data("bias report of an empty dataset".into()));
    }
    Ok(counts.map(|row| {
        let total: usize = row.iter().sum();
        row.map(|c| c as f64 / total as f64)
    }))
}

/// Frequency of the high rate at each hour across a profile set.
pub fn high_rate_frequency(profiles: &[TariffProfile]) -> [f64; HOURS] {
    let n = profiles.len().max(1) as f64;
    std::array::from_fn(|h| profiles.iter().filter(|p| p.levels()[h] == Rate::High).count() as f64 / n)
}

/// Max-over-min ratio of a per-hour frequency; infinite when some hour never
/// sees the rate while another does.
pub fn max_min_ratio(freq: &[f64]) -> f64 {
    let max = freq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = freq.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else if max > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}
