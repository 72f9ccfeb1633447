use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HOURS: usize = 24;

/// One of the three hourly tariff levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rate {
    Low,
    Medium,
    High,
}

impl Rate {
    pub const ALL: [Rate; 3] = [Rate::Low, Rate::Medium, Rate::High];

    /// Price per kWh.
    pub fn value(self) -> f64 {
        match self {
            Rate::Low => 0.2,
            Rate::Medium => 0.5,
            Rate::High => 0.8,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_value(v: f64) -> Option<Rate> {
        Rate::ALL.into_iter().find(|r| r.value() == v)
    }

    pub fn symbol(self) -> char {
        match self {
            Rate::Low => 'L',
            Rate::Medium => 'M',
            Rate::High => 'H',
        }
    }

    fn up(self) -> Rate {
        match self {
            Rate::Low => Rate::Medium,
            _ => Rate::High,
        }
    }

    fn down(self) -> Rate {
        match self {
            Rate::High => Rate::Medium,
            _ => Rate::Low,
        }
    }
}

/// A day-long sequence of hourly tariff levels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TariffProfile {
    pub id: String,
    levels: [Rate; HOURS],
}

impl TariffProfile {
    pub fn new(id: impl Into<String>, levels: [Rate; HOURS]) -> Self {
        TariffProfile {
            id: id.into(),
            levels,
        }
    }

    /// Builds a profile from prices; every entry must be one of 0.2, 0.5, 0.8.
    pub fn from_rates(id: impl Into<String>, rates: &[f64]) -> Result<Self> {
        let id = id.into();
        if rates.len() != HOURS {
            return Err(Error::Data(format!(
                "profile {id} has {} rates, expected {HOURS}",
                rates.len()
            )));
        }
        let mut levels = [Rate::Low; HOURS];
        for (h, &r) in rates.iter().enumerate() {
            levels[h] = Rate::from_value(r)
                .ok_or_else(|| Error::Data(format!("profile {id}: rate {r} at hour {h}")))?;
        }
        Ok(TariffProfile { id, levels })
    }

    /// Parses a 24-character string of `L`, `M`, `H`.
    pub fn from_symbols(id: impl Into<String>, symbols: &str) -> Result<Self> {
        let id = id.into();
        let levels: Vec<Rate> = symbols
            .chars()
            .map(|c| match c {
                'L' => Ok(Rate::Low),
                'M' => Ok(Rate::Medium),
                'H' => Ok(Rate::High),
                other => Err(Error::Data(format!("profile {id}: bad symbol {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let levels: [Rate; HOURS] = levels
            .try_into()
            .map_err(|v: Vec<Rate>| Error::Data(format!("profile {id}: {} symbols", v.len())))?;
        Ok(TariffProfile { id, levels })
    }

    pub fn flat(id: impl Into<String>, rate: Rate) -> Self {
        TariffProfile::new(id, [rate; HOURS])
    }

    pub fn levels(&self) -> &[Rate; HOURS] {
        &self.levels
    }

    pub fn rates(&self) -> [f64; HOURS] {
        self.levels.map(Rate::value)
    }

    pub fn same_rates(&self, other: &TariffProfile) -> bool {
        self.levels == other.levels
    }
}

impl fmt::Display for TariffProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.levels.iter().map(|r| r.symbol()).collect();
        write!(f, "{}:{}", self.id, s)
    }
}

/// Peak-pricing assignment for one average daily load curve: the top quarter
/// of hours get the high rate, the bottom quarter the low rate, the rest the
/// medium rate. Equal loads are ordered by a seeded shuffle.
pub fn quartile_levels(avg_load: &[f64; HOURS], rng: &mut impl Rng) -> [Rate; HOURS] {
    let mut order: Vec<usize> = (0..HOURS).collect();
    order.shuffle(rng);
    // stable sort keeps the shuffled order among equal loads
    order.sort_by(|&a, &b| avg_load[a].total_cmp(&avg_load[b]));
    let quarter = HOURS / 4;
    let mut levels = [Rate::Medium; HOURS];
    for &h in &order[..quarter] {
        levels[h] = Rate::Low;
    }
    for &h in &order[HOURS - quarter..] {
        levels[h] = Rate::High;
    }
    levels
}

const CURATION_RETRIES: usize = 1000;

/// Curates `k` distinct historical profiles from consumers' average load
/// curves: consumers are visited round-robin from a seeded offset, each slot
/// gets the quartile assignment of its consumer, and two random hours are
/// moved by one level.
pub fn curate_profiles_in(
    consumer_avg_profiles: &[[f64; HOURS]],
    k: usize,
    seed: u64,
) -> Result<Vec<TariffProfile>> {
    if k == 0 {
        return Err(Error::Config("need at least one historical profile".into()));
    }
    if consumer_avg_profiles.is_empty() {
        return Err(Error::Config("no consumer load curves to curate from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = consumer_avg_profiles.len();
    let offset = rng.random_range(0..n);
    let mut out: Vec<TariffProfile> = Vec::with_capacity(k);
    for slot in 0..k {
        let avg = &consumer_avg_profiles[(offset + slot) % n];
        let mut accepted = None;
        for _ in 0..CURATION_RETRIES {
            let mut levels = quartile_levels(avg, &mut rng);
            let hours = rand::seq::index::sample(&mut rng, HOURS, 2);
            for h in hours.iter() {
                levels[h] = if rng.random_bool(0.5) {
                    levels[h].up()
                } else {
                    levels[h].down()
                };
            }
            if out.iter().all(|p| p.levels != levels) {
                accepted = Some(levels);
                break;
            }
        }
        let levels = accepted.ok_or_else(|| {
            Error::Config(format!("could not curate {k} distinct profiles (stuck at slot {slot})"))
        })?;
        out.push(TariffProfile::new(format!("in-{slot:02}"), levels));
    }
    Ok(out)
}

/// Draws `m` profiles uniformly from all level combinations, distinct from
/// each other and from `exclude`.
pub fn sample_profiles_out(m: usize, seed: u64, exclude: &[TariffProfile]) -> Vec<TariffProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<[Rate; HOURS]> = exclude.iter().map(|p| p.levels).collect();
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let levels: [Rate; HOURS] = std::array::from_fn(|_| Rate::ALL[rng.random_range(0..3)]);
        if seen.insert(levels) {
            out.push(TariffProfile::new(format!("out-{:02}", out.len()), levels));
        }
    }
    out
}

/// Score used by the historical allocation heuristic: expected bill of the
/// consumer's recent average day under the profile.
pub fn policy_score(recent_avg_load: &[f64; HOURS], profile: &TariffProfile) -> f64 {
    profile
        .rates()
        .iter()
        .zip(recent_avg_load)
        .map(|(r, l)| r * l)
        .sum()
}

/// Picks the candidate that charges the most on the consumer's recent load,
/// which places high rates where consumption is high. Ties go to the lowest id.
pub fn policy_allocate<'a>(
    recent_avg_load: &[f64; HOURS],
    candidates: &'a [TariffProfile],
) -> Result<&'a TariffProfile> {
    let mut best: Option<(&TariffProfile, f64)> = None;
    for p in candidates {
        let s = policy_score(recent_avg_load, p);
        best = match best {
            None => Some((p, s)),
            Some((bp, bs)) if s > bs || (s == bs && p.id < bp.id) => Some((p, s)),
            keep => keep,
        };
    }
    best.map(|(p, _)| p)
        .ok_or_else(|| Error::Config("no candidate profiles for allocation".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbols_round_trip() {
        let p = TariffProfile::from_symbols("a", "HHMMLLHHMMLLHHMMLLHHMMLL").unwrap();
        assert_eq!(p.rates()[0], 0.8);
        assert_eq!(p.rates()[4], 0.2);
        assert!(TariffProfile::from_symbols("a", "HHM").is_err());
        assert!(TariffProfile::from_rates("a", &[0.3; 24]).is_err());
    }

    #[test]
    fn quartiles_mark_peak_hours_high() {
        let mut avg = [10.0; HOURS];
        for h in 9..=12 {
            avg[h] = 200.0;
        }
        avg[14] = 150.0;
        avg[15] = 140.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let levels = quartile_levels(&avg, &mut rng);
        for h in [9, 10, 11, 12, 14, 15] {
            assert_eq!(levels[h], Rate::High, "hour {h}");
        }
        assert_eq!(levels.iter().filter(|&&r| r == Rate::Low).count(), 6);
        assert_eq!(levels.iter().filter(|&&r| r == Rate::High).count(), 6);
    }

    #[test]
    fn single_profile_curation() {
        let avg = [[1.0; HOURS]];
        let out = curate_profiles_in(&avg, 1, 9).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, "in-00");
        assert!(curate_profiles_in(&avg, 0, 9).is_err());
    }

    #[test]
    fn curated_profiles_are_distinct() {
        let mut avg = [5.0; HOURS];
        avg[10] = 50.0;
        let out = curate_profiles_in(&[avg], 30, 1).unwrap();
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                assert!(!out[i].same_rates(&out[j]));
            }
        }
    }

    #[test]
    fn out_of_distribution_set_is_disjoint() {
        let avg = [[1.0; HOURS]];
        let t_in = curate_profiles_in(&avg, 5, 2).unwrap();
        let t_out = sample_profiles_out(40, 5, &t_in);
        assert_eq!(t_out.len(), 40);
        assert!(t_out.iter().all(|o| t_in.iter().all(|i| !i.same_rates(o))));
        assert!(sample_profiles_out(0, 5, &t_in).is_empty());
    }

    #[test]
    fn policy_prefers_high_rate_on_peak() {
        let mut load = [1.0; HOURS];
        load[17] = 100.0;
        let mut a = [Rate::Medium; HOURS];
        let mut b = [Rate::Medium; HOURS];
        a[3] = Rate::High;
        b[17] = Rate::High;
        let cands = vec![TariffProfile::new("a", a), TariffProfile::new("b", b)];
        assert_eq!(policy_allocate(&load, &cands).unwrap().id, "b");
        assert_eq!(policy_allocate(&load, &cands[..1]).unwrap().id, "a");
        assert!(policy_allocate(&load, &[]).is_err());
    }

    #[test]
    fn policy_ties_go_to_lowest_id() {
        let load = [1.0; HOURS];
        let cands = vec![
            TariffProfile::flat("z", Rate::Medium),
            TariffProfile::flat("b", Rate::Medium),
            TariffProfile::flat("k", Rate::Medium),
        ];
        assert_eq!(policy_allocate(&load, &cands).unwrap().id, "b");
    }
}
