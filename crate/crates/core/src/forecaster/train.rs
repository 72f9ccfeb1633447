use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tariffshift_autodiff::{derive_seed, AdamState, Graph, Mode, RunningStats, TensorError, Var};

use super::loss::pinball;
use super::model::{EpochLog, TrainedModel};
use super::variant::TrainingConfig;
use super::window::ForecastWindow;
use crate::error::{Error, Result};
use crate::fmt_f64;

/// Windows per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite(op)) => Error::Divergence {
            epoch,
            batch,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Splits a shuffled order into batches; a trailing batch of one sample is
/// merged into the previous batch so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

fn objective(
    model: &TrainedModel,
    g: &mut Graph,
    batch: &[&ForecastWindow],
    quantiles: &[f64],
    l2_lambda: f64,
    mode: Mode,
    stats: &mut [RunningStats],
) -> Result<(Var, Var)> {
    let h = model.dims.horizon;
    let targets: Vec<f64> = batch.iter().flat_map(|w| w.target.iter().copied()).collect();
    let levels: Vec<f64> = quantiles.iter().flat_map(|&q| std::iter::repeat_n(q, h)).collect();
    let fwd = model.forward(g, batch, quantiles, mode, stats)?;
    let loss = g.pinball(fwd.pred, &targets, &levels)?;
    let reg = g.scale(fwd.kernel_l2, l2_lambda)?;
    Ok((g.add(loss, reg)?, loss))
}

/// Training objective on one batch with one quantile level per window:
/// mean pinball loss plus `l2_lambda` times the squared convolution kernels.
pub fn training_objective(
    model: &TrainedModel,
    g: &mut Graph,
    batch: &[&ForecastWindow],
    quantiles: &[f64],
    l2_lambda: f64,
    mode: Mode,
    stats: &mut [RunningStats],
) -> Result<Var> {
    objective(model, g, batch, quantiles, l2_lambda, mode, stats).map(|(total, _)| total)
}

/// Trains with Adam on randomly ordered mini-batches, one uniformly drawn
/// quantile level per sample. Keeps the parameters of the epoch with the
/// lowest validation AQL (or the last epoch when `val` is empty).
pub fn train(
    mut model: TrainedModel,
    train: &[ForecastWindow],
    val: &[ForecastWindow],
    config: &TrainingConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(model);
    }
    if train.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 windows, got {}",
            train.len()
        )));
    }
    let mut adam = AdamState::new(config.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/shuffle"));
    let mut quantile_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/quantiles"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, TrainedModel)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, idx) in batches(&order, config.batch_size).into_iter().enumerate() {
            let refs: Vec<&ForecastWindow> = idx.iter().map(|&i| &train[i]).collect();
            let qs: Vec<f64> = refs.iter().map(|_| quantile_rng.random::<f64>()).collect();

            let mut stats = std::mem::take(&mut model.bn_stats);
            let mut g = Graph::new();
            let step = (|| -> Result<f64> {
                let (total, loss) = objective(&model, &mut g, &refs, &qs, config.l2_lambda, Mode::Train, &mut stats)?;
                let grads = g.backward(total)?;
                grads.apply_to(&mut model.params)?;
                Ok(g.value(loss)[0])
            })();
            model.bn_stats = stats;
            let loss = step.map_err(|e| diverged(e, epoch, bi))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: format!("loss {loss}"),
                });
            }
            adam.step(&mut model.params)?;
            loss_sum += loss * refs.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_aql = if val.is_empty() {
            None
        } else {
            Some(evaluate_aql(&model, val, &config.eval_quantiles)?)
        };
        debug!("{} epoch {epoch}: train {train_loss:.5}, val {val_aql:?}", model.variant);
        model.loss_history.push(EpochLog {
            epoch,
            train_loss,
            val_aql,
        });
        let score = val_aql.unwrap_or(f64::NEG_INFINITY);
        if val_aql.is_none() || best.as_ref().is_none_or(|(s, _)| score < *s) {
            model.selected_epoch = epoch;
            best = Some((score, model.clone()));
        }
    }
    let (score, mut chosen) = best.expect("at least one epoch ran");
    chosen.loss_history = model.loss_history;
    info!(
        "{} trained: selected epoch {} (val AQL {score:.5})",
        chosen.variant, chosen.selected_epoch
    );
    for p in chosen.params.iter_mut() {
        p.1.clear_grad();
    }
    Ok(chosen)
}

/// Normalized-scale predictions for every (window, quantile) pair:
/// `out[w][k]` is the horizon forecast of window `w` at `quantiles[k]`.
fn predict_normalized(model: &TrainedModel, windows: &[&ForecastWindow], quantiles: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    let h = model.dims.horizon;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        let mut refs = Vec::with_capacity(chunk.len() * quantiles.len());
        let mut qs = Vec::with_capacity(refs.capacity());
        for &w in chunk {
            for &q in quantiles {
                refs.push(w);
                qs.push(q);
            }
        }
        let mut g = Graph::new();
        let mut stats = model.bn_stats.clone();
        let fwd = model.forward(&mut g, &refs, &qs, Mode::Eval, &mut stats)?;
        let values = g.value(fwd.pred);
        for (i, _) in chunk.iter().enumerate() {
            out.push(
                (0..quantiles.len())
                    .map(|k| {
                        let row = i * quantiles.len() + k;
                        values[row * h..(row + 1) * h].to_vec()
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn check_levels(quantiles: &[f64]) -> Result<()> {
    if quantiles.is_empty() || quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(Error::Config(format!("quantile levels must lie in (0, 1), got {quantiles:?}")));
    }
    Ok(())
}

/// Denormalized forecasts for several windows: `out[w][hour][k]`.
pub fn predict_batch(model: &TrainedModel, windows: &[&ForecastWindow], quantiles: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    check_levels(quantiles)?;
    let raw = predict_normalized(model, windows, quantiles)?;
    windows
        .iter()
        .zip(raw)
        .map(|(w, per_q)| {
            let norm = model.norm_for(w.consumer_id)?;
            Ok((0..model.dims.horizon)
                .map(|t| per_q.iter().map(|f| norm.invert(f[t])).collect())
                .collect())
        })
        .collect()
}

/// Forecast of one window in kWh, one row per hour and one column per
/// quantile level.
pub fn predict(model: &TrainedModel, window: &ForecastWindow, quantiles: &[f64]) -> Result<Vec<Vec<f64>>> {
    Ok(predict_batch(model, &[window], quantiles)?.remove(0))
}

/// Average pinball loss over windows, hours and quantile levels, on the
/// normalized scale.
pub fn evaluate_aql(model: &TrainedModel, windows: &[ForecastWindow], quantiles: &[f64]) -> Result<f64> {
    check_levels(quantiles)?;
    if windows.is_empty() {
        return Err(Error::Data("AQL over no windows".into()));
    }
    let refs: Vec<&ForecastWindow> = windows.iter().collect();
    let preds = predict_normalized(model, &refs, quantiles)?;
    let mut total = 0.0;
    for (w, per_q) in windows.iter().zip(&preds) {
        for (f, &q) in per_q.iter().zip(quantiles) {
            total += f.iter().zip(&w.target).map(|(p, y)| pinball(y - p, q)).sum::<f64>();
        }
    }
    Ok(total / (windows.len() * model.dims.horizon * quantiles.len()) as f64)
}

pub fn write_loss_history(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["epoch", "train_loss", "val_aql"])
        .map_err(|e| Error::csv(path, e))?;
    for e in history {
        w.write_record([
            e.epoch.to_string(),
            fmt_f64(e.train_loss),
            e.val_aql.map(fmt_f64).unwrap_or_default(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
