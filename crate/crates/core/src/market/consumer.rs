use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tariffshift_autodiff::derive_seed;

use super::tariff::HOURS;
use crate::error::{Error, Result};

/// Meter resolution: every simulated load is a multiple of 1/1024 kWh, so
/// daily totals are exact in floating point whatever the summation order.
pub const METER_RESOLUTION: f64 = 1.0 / 1024.0;

pub fn quantize(kwh: f64) -> f64 {
    (kwh / METER_RESOLUTION).round() * METER_RESOLUTION
}

/// Sampling ranges for office-complex consumers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsumerRanges {
    pub sub_consumers: Vec<u32>,
    pub working_days_per_week: Vec<u32>,
    pub work_start_base: Vec<u32>,
    pub work_start_jitter: u32,
    pub break_start_base: Vec<u32>,
    pub break_start_jitter: u32,
    pub work_duration_base: u32,
    pub work_duration_jitter: u32,
    pub shiftable_kw: Vec<f64>,
    pub per_sub_load_kw: f64,
    pub idle_load_kw: f64,
    pub noise_sigma: f64,
}

impl Default for ConsumerRanges {
    fn default() -> Self {
        ConsumerRanges {
            sub_consumers: vec![3, 5],
            working_days_per_week: vec![3, 4],
            work_start_base: vec![8, 9, 10],
            work_start_jitter: 1,
            break_start_base: vec![13, 14],
            break_start_jitter: 1,
            work_duration_base: 8,
            work_duration_jitter: 1,
            shiftable_kw: vec![600.0, 2400.0],
            per_sub_load_kw: 50.0,
            idle_load_kw: 10.0,
            noise_sigma: 0.05,
        }
    }
}

/// Realized schedule of one consumer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsumerSpec {
    pub sub_consumers: u32,
    pub working_days_per_week: u32,
    pub work_start_hour: usize,
    pub break_start_hour: usize,
    pub work_duration_hours: usize,
    pub shiftable_kw: f64,
    pub per_sub_load_kw: f64,
    pub idle_load_kw: f64,
    pub noise_sigma: f64,
}

fn pick<T: Copy>(rng: &mut impl Rng, values: &[T], what: &str) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Config(format!("empty range for {what}")));
    }
    Ok(values[rng.random_range(0..values.len())])
}

fn jitter(rng: &mut impl Rng, base: u32, spread: u32) -> i64 {
    base as i64 + rng.random_range(-(spread as i64)..=spread as i64)
}

pub fn sample_consumer(ranges: &ConsumerRanges, seed: u64) -> Result<ConsumerSpec> {
    if ranges.per_sub_load_kw <= 0.0 || ranges.idle_load_kw < 0.0 || ranges.noise_sigma < 0.0 {
        return Err(Error::Config("load magnitudes out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sub_consumers = pick(&mut rng, &ranges.sub_consumers, "sub_consumers")?;
    let working_days_per_week = pick(&mut rng, &ranges.working_days_per_week, "working days")?;
    let start_base = pick(&mut rng, &ranges.work_start_base, "work start")?;
    let start = jitter(&mut rng, start_base, ranges.work_start_jitter);
    let break_base = pick(&mut rng, &ranges.break_start_base, "break start")?;
    let brk = jitter(&mut rng, break_base, ranges.break_start_jitter);
    let duration = jitter(&mut rng, ranges.work_duration_base, ranges.work_duration_jitter);
    let shiftable_kw = pick(&mut rng, &ranges.shiftable_kw, "shiftable load")?;
    if working_days_per_week > 7 {
        return Err(Error::Config("more than 7 working days per week".into()));
    }
    if start < 0 || duration < 1 || start + duration > HOURS as i64 || !(0..HOURS as i64).contains(&brk) {
        return Err(Error::Config(format!(
            "schedule out of the day: start {start}, duration {duration}, break {brk}"
        )));
    }
    Ok(ConsumerSpec {
        sub_consumers,
        working_days_per_week,
        work_start_hour: start as usize,
        break_start_hour: brk as usize,
        work_duration_hours: duration as usize,
        shiftable_kw,
        per_sub_load_kw: ranges.per_sub_load_kw,
        idle_load_kw: ranges.idle_load_kw,
        noise_sigma: ranges.noise_sigma,
    })
}

impl ConsumerSpec {
    /// Working days are the first `working_days_per_week` days of each week.
    pub fn is_working_day(&self, day: i64) -> bool {
        (day.rem_euclid(7) as u32) < self.working_days_per_week
    }

    pub fn is_work_hour(&self, h: usize) -> bool {
        h >= self.work_start_hour
            && h < self.work_start_hour + self.work_duration_hours
            && h != self.break_start_hour
    }

    /// Hour at which the shiftable block runs when not moved.
    pub fn preferred_hour(&self) -> usize {
        self.work_start_hour
    }

    /// Shiftable energy scheduled on `day` (none on non-working days).
    pub fn shiftable_on(&self, day: i64) -> f64 {
        if self.is_working_day(day) {
            self.shiftable_kw
        } else {
            0.0
        }
    }
}

/// Non-shiftable load of one day. `day` may be negative for warm-up history.
pub fn base_load_day(spec: &ConsumerSpec, day: i64, seed: u64) -> [f64; HOURS] {
    let working = spec.is_working_day(day);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("base-load/{day}")));
    let sigma = spec.noise_sigma;
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    let active = spec.sub_consumers as f64 * spec.per_sub_load_kw;
    std::array::from_fn(|h| {
        let eps = noise
            .as_ref()
            .map(|n| n.sample(&mut rng).clamp(-3.0 * sigma, 3.0 * sigma))
            .unwrap_or(0.0);
        let w = if working && spec.is_work_hour(h) { 1.0 } else { 0.0 };
        quantize(spec.idle_load_kw + active * w * (1.0 + eps))
    })
}

/// How a consumer reacts to a day's tariff.
#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub total_load: Vec<f64>,
    /// Hour the block was moved to, if it moved.
    pub shift_target: Option<usize>,
    /// Hour where the block ends up.
    pub block_hour: usize,
}

/// Moves the whole shiftable block from `preferred_hour` to the earliest
/// cheapest hour when that hour is strictly cheaper; otherwise it stays.
/// Works for any horizon length.
pub fn respond_to_tariff(base_load: &[f64], shiftable_kw: f64, preferred_hour: usize, rates: &[f64]) -> Response {
    assert_eq!(base_load.len(), rates.len(), "load and tariff horizons differ");
    assert!(preferred_hour < rates.len(), "preferred hour outside the horizon");
    let mut cheapest = 0;
    for h in 1..rates.len() {
        if rates[h] < rates[cheapest] {
            cheapest = h;
        }
    }
    let shift_target = (rates[cheapest] < rates[preferred_hour]).then_some(cheapest);
    let block_hour = shift_target.unwrap_or(preferred_hour);
    let mut total_load = base_load.to_vec();
    total_load[block_hour] += shiftable_kw;
    Response {
        total_load,
        shift_target,
        block_hour,
    }
}
