#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tariffshift::forecaster::{ForecastWindow, ModelDims};
use tariffshift::market::{Calendar, Rate};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rate(rng: &mut ChaCha8Rng) -> f64 {
    Rate::ALL[rng.random_range(0..3)].value()
}

/// Synthetic window with random history, tariffs and targets whose first
/// forecast hour is `target_start`.
pub fn random_window(rng: &mut ChaCha8Rng, dims: &ModelDims, target_start: usize, indicator: bool) -> ForecastWindow {
    let (l, h) = (dims.lookback, dims.horizon);
    let start = target_start - l;
    let block = rng.random_range(0..h);
    ForecastWindow {
        consumer_id: 0,
        target_start,
        past_consumption: (0..l).map(|_| rng.random_range(-2.0..2.0)).collect(),
        past_tariffs: (0..l).map(|_| random_rate(rng)).collect(),
        past_calendar: (start..target_start).map(Calendar::at).collect(),
        future_tariffs: (0..h).map(|_| random_rate(rng)).collect(),
        future_calendar: (target_start..target_start + h).map(Calendar::at).collect(),
        future_shift_indicator: indicator.then(|| (0..h).map(|i| if i == block { 1.0 } else { 0.0 }).collect()),
        target: (0..h).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}
