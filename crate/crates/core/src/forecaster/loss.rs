use crate::error::{Error, Result};

/// Pinball loss of one residual `e = y - y_hat` at level `q`.
pub fn pinball(e: f64, q: f64) -> f64 {
    (q * e).max((q - 1.0) * e)
}

/// Mean pinball loss over every element and quantile level.
/// `predictions[j]` holds the forecasts for `quantiles[j]` and is aligned
/// with `targets`.
pub fn quantile_loss(targets: &[f64], predictions: &[&[f64]], quantiles: &[f64]) -> Result<f64> {
    if quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(Error::Config(format!("quantile levels must lie in (0, 1), got {quantiles:?}")));
    }
    if predictions.len() != quantiles.len() || predictions.iter().any(|p| p.len() != targets.len()) {
        return Err(Error::Data("predictions are not aligned with targets and quantiles".into()));
    }
    if targets.is_empty() || quantiles.is_empty() {
        return Err(Error::Data("quantile loss over no elements".into()));
    }
    let mut total = 0.0;
    for (pred, &q) in predictions.iter().zip(quantiles) {
        total += pred.iter().zip(targets).map(|(p, y)| pinball(y - p, q)).sum::<f64>();
    }
    Ok(total / (targets.len() * quantiles.len()) as f64)
}
