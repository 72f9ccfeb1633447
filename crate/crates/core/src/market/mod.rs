//! Desk-scale electricity market: consumers, tariff profiles, allocation
//! history and the simulator that ties them together.

pub mod consumer;
pub mod csv_io;
pub mod sim;
pub mod tariff;

pub use consumer::{
    base_load_day, quantize, respond_to_tariff, sample_consumer, ConsumerRanges, ConsumerSpec, Response,
    METER_RESOLUTION,
};
pub use sim::{
    bias_report, consumer_avg_profiles, high_rate_frequency, max_min_ratio, simulate, Calendar, ConsumerSeries,
    DayRecord, SimDataset, DAYS_PER_MONTH, POLICY_WINDOW_DAYS, WARMUP_DAYS,
};
pub use tariff::{
    curate_profiles_in, policy_allocate, policy_score, quartile_levels, sample_profiles_out, Rate, TariffProfile,
    HOURS,
};
