use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the future tariff profile enters the forecaster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    /// No future tariff input.
    NoX,
    /// Per-hour tariff embedding, each hour on its own.
    Ind,
    /// Dense layer over the whole day's rates.
    FC,
    /// Permutation-equivariant set network output used directly.
    PE,
    /// Self-attention with hour-of-day features in keys, values and queries.
    Att,
    /// Self-attention on tariff embeddings only.
    AttNoHOD,
    /// Attention whose queries come from the permutation-equivariant network.
    AttPE,
    /// AttPE plus the ground-truth hour the shiftable block lands in.
    UB,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 8] = [
        ModelVariant::NoX,
        ModelVariant::Ind,
        ModelVariant::FC,
        ModelVariant::PE,
        ModelVariant::Att,
        ModelVariant::AttNoHOD,
        ModelVariant::AttPE,
        ModelVariant::UB,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ModelVariant::NoX => "NoX",
            ModelVariant::Ind => "Ind",
            ModelVariant::FC => "FC",
            ModelVariant::PE => "PE",
            ModelVariant::Att => "Att",
            ModelVariant::AttNoHOD => "AttNoHOD",
            ModelVariant::AttPE => "AttPE",
            ModelVariant::UB => "UB",
        }
    }

    pub fn needs_shift_indicator(self) -> bool {
        self == ModelVariant::UB
    }

    pub fn uses_attention(self) -> bool {
        matches!(
            self,
            ModelVariant::Att | ModelVariant::AttNoHOD | ModelVariant::AttPE | ModelVariant::UB
        )
    }

    /// Queries come from the set network rather than a per-hour linear map.
    pub fn pe_queries(self) -> bool {
        matches!(self, ModelVariant::AttPE | ModelVariant::UB)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Attention and tariff-feature width.
    pub d: usize,
    /// Output width of the set network.
    pub d_prime: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub dilations: Vec<usize>,
    pub cwfc_units: usize,
    pub local_filters: usize,
    pub calendar_embed: usize,
    pub tariff_embed: usize,
    pub head_units: Vec<usize>,
    pub iqn_basis: usize,
    /// Input window length in hours.
    pub lookback: usize,
    /// Forecast horizon in hours.
    pub horizon: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 10,
            d_prime: 20,
            conv_filters: 16,
            conv_kernel: 2,
            dilations: vec![1, 2, 4],
            cwfc_units: 24,
            local_filters: 10,
            calendar_embed: 5,
            tariff_embed: 10,
            head_units: vec![40, 10, 1],
            iqn_basis: 8,
            lookback: 168,
            horizon: 24,
        }
    }
}

impl ModelDims {
    /// Small configuration for finite-difference checks.
    pub fn toy() -> Self {
        ModelDims {
            d: 3,
            d_prime: 4,
            conv_filters: 3,
            conv_kernel: 2,
            dilations: vec![1, 2, 4],
            cwfc_units: 2,
            local_filters: 3,
            calendar_embed: 2,
            tariff_embed: 3,
            head_units: vec![4, 3, 1],
            iqn_basis: 4,
            lookback: 6,
            horizon: 2,
        }
    }

    pub fn conv_layers(&self) -> usize {
        self.dilations.len()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.d,
            self.d_prime,
            self.conv_filters,
            self.conv_kernel,
            self.cwfc_units,
            self.local_filters,
            self.calendar_embed,
            self.tariff_embed,
            self.iqn_basis,
            self.lookback,
            self.horizon,
        ];
        if sizes.contains(&0) || self.dilations.contains(&0) || self.head_units.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.dilations.is_empty() {
            return Err(Error::Config("need at least one convolution layer".into()));
        }
        if self.head_units.last() != Some(&1) {
            return Err(Error::Config("the head must end in a single unit".into()));
        }
        if self.cwfc_units != self.horizon {
            return Err(Error::Config(format!(
                "channel-wise layer has {} units for a {}-hour horizon",
                self.cwfc_units, self.horizon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2_lambda: f64,
    pub eval_quantiles: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 16,
            epochs: 200,
            lr: 1e-4,
            l2_lambda: 1e-3,
            eval_quantiles: vec![0.1, 0.5, 0.9],
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalization".into()));
        }
        if !(self.lr > 0.0) || !(self.l2_lambda >= 0.0) {
            return Err(Error::Config("learning rate must be positive and L2 weight non-negative".into()));
        }
        if self.eval_quantiles.is_empty() || self.eval_quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Config("evaluation quantiles must lie in (0, 1)".into()));
        }
        Ok(())
    }
}
