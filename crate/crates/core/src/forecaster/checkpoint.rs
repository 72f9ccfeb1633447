//! JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tariffshift_autodiff::{ParameterStore, RunningStats, Tensor};

use super::model::{EpochLog, TrainedModel};
use super::variant::{ModelDims, ModelVariant};
use super::window::Normalization;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    variant: ModelVariant,
    dims: ModelDims,
    seed: u64,
    selected_epoch: usize,
    parameters: BTreeMap<String, StoredTensor>,
    batchnorm_stats: Vec<StoredStats>,
    normalization: BTreeMap<usize, Normalization>,
    loss_history: Vec<EpochLog>,
}

pub fn save_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    let ckpt = Checkpoint {
        variant: model.variant,
        dims: model.dims.clone(),
        seed: model.seed,
        selected_epoch: model.selected_epoch,
        parameters: model
            .params
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect(),
        batchnorm_stats: model
            .bn_stats
            .iter()
            .map(|s| StoredStats {
                mean: s.mean.clone(),
                var: s.var.clone(),
            })
            .collect(),
        normalization: model.normalization.clone(),
        loss_history: model.loss_history.clone(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(&ckpt).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    ckpt.dims.validate()?;
    let mut params = ParameterStore::new();
    for (name, t) in ckpt.parameters {
        params.insert(name, Tensor::new(t.shape, t.values)?)?;
    }
    // the stored layout must match what the variant assembles
    let reference = super::model::assemble_model(ckpt.variant, &ckpt.dims, 0)?;
    for (name, t) in reference.params.iter() {
        let stored = params
            .get(name)
            .map_err(|_| Error::Data(format!("{}: parameter {name} missing", path.display())))?;
        if stored.shape() != t.shape() {
            return Err(Error::Data(format!("{}: parameter {name} has shape {:?}", path.display(), stored.shape())));
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::Data(format!("{}: unexpected extra parameters", path.display())));
    }
    Ok(TrainedModel {
        variant: ckpt.variant,
        dims: ckpt.dims,
        seed: ckpt.seed,
        params,
        bn_stats: ckpt
            .batchnorm_stats
            .into_iter()
            .map(|s| RunningStats { mean: s.mean, var: s.var })
            .collect(),
        normalization: ckpt.normalization,
        loss_history: ckpt.loss_history,
        selected_epoch: ckpt.selected_epoch,
    })
}
