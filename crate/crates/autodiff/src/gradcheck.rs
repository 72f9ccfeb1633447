//! Central finite-difference gradient checking.

use crate::graph::{Graph, Var};
use crate::tensor::{ParameterStore, Result};

/// Outcome of a gradient check over every scalar of every parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Coordinates whose ±h stencil crossed a non-differentiable point
    /// (relu kink, maxpool winner change, pinball sign change).
    pub skipped_kinks: usize,
}

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// with step `h`. `loss_fn` must be deterministic and return a scalar node.
pub fn check_gradients<F>(params: &ParameterStore, h: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    g.track_branches(true);
    let loss = loss_fn(&mut g, params)?;
    let base_sig = g.branch_signature();
    let mut analytic = params.clone();
    g.backward(loss)?.apply_to(&mut analytic)?;

    let mut eval = |p: &ParameterStore| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        g.track_branches(true);
        let l = loss_fn(&mut g, p)?;
        Ok((g.value(l)[0], g.branch_signature()))
    };

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = match analytic.get(&name)?.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; params.get(&name)?.len()],
        };
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.get(&name)?.values()[i];
            probe.get_mut(&name)?.values_mut()[i] = orig + h;
            let (up, sig_up) = eval(&probe)?;
            probe.get_mut(&name)?.values_mut()[i] = orig - h;
            let (down, sig_down) = eval(&probe)?;
            probe.get_mut(&name)?.values_mut()[i] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
