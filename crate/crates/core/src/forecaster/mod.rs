//! Quantile load forecasting conditioned on a candidate tariff profile.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod train;
pub mod variant;
pub mod window;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{pinball, quantile_loss};
pub use model::{assemble_model, attention, pe_query_net, quantile_basis, EpochLog, TrainedModel};
pub use train::{evaluate_aql, predict, predict_batch, train, training_objective, write_loss_history};
pub use variant::{ModelDims, ModelVariant, TrainingConfig};
pub use window::{featurize, fit_normalization, ForecastWindow, Normalization, Split, STD_FLOOR, WINDOW_SHIFT};
