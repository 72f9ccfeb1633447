use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::WholesaleTag;
use crate::error::{Error, Result};
use crate::forecaster::{ModelDims, ModelVariant, TrainingConfig};
use crate::market::ConsumerRanges;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; sweep seeds are `seed, seed + 1, ...`.
    pub seed: u64,
    pub n_seeds: usize,
    pub n_consumers: usize,
    pub months: usize,
    pub split_months: (usize, usize, usize),
    pub t_in_sizes: Vec<usize>,
    pub t_out_size: usize,
    pub variants: Vec<ModelVariant>,
    pub wholesale: Vec<WholesaleTag>,
    pub output_dir: PathBuf,
    pub consumer_ranges: ConsumerRanges,
    pub dims: ModelDims,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            n_seeds: 3,
            n_consumers: 12,
            months: 6,
            split_months: (4, 1, 1),
            t_in_sizes: vec![2, 5, 8, 10, 12, 15, 20, 25, 30, 35],
            t_out_size: 40,
            variants: ModelVariant::ALL.to_vec(),
            wholesale: vec![WholesaleTag::Option1, WholesaleTag::Option2],
            output_dir: PathBuf::from("runs"),
            consumer_ranges: ConsumerRanges::default(),
            dims: ModelDims::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split_months;
        if a + b + c != self.months {
            return Err(Error::Config(format!(
                "split months {a}+{b}+{c} do not add up to {} months",
                self.months
            )));
        }
        if a == 0 || c == 0 {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        if self.t_in_sizes.is_empty() || self.t_in_sizes.contains(&0) {
            return Err(Error::Config("t_in_sizes must be a non-empty list of positive sizes".into()));
        }
        if self.n_seeds == 0 || self.n_consumers == 0 {
            return Err(Error::Config("need at least one seed and one consumer".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no model variants selected".into()));
        }
        self.dims.validate()?;
        self.training.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed + i).collect()
    }
}
