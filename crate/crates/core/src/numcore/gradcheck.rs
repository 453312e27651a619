//! Central finite differences, used as the independent oracle for every
//! analytic gradient. Nothing here touches the backward pass.

use super::{ParamId, ParamStore};
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose ±h evaluations took a different discrete branch.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares `analytic` gradients of the listed parameters against central
/// differences of `loss`, which returns the loss and the discrete-branch
/// signature of one forward evaluation.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &[Vec<f64>],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<(f64, u64)>,
) -> Result<GradCheckReport> {
    let (_, base_sig) = loss(store)?;
    let mut report = GradCheckReport::default();
    for (&id, grad) in ids.iter().zip(analytic) {
        for i in 0..store.tensor(id).numel() {
            let x0 = store.tensor(id).values()[i];
            store.get_mut(id).tensor.values_mut()[i] = x0 + h;
            let (lp, sp) = loss(store)?;
            store.get_mut(id).tensor.values_mut()[i] = x0 - h;
            let (lm, sm) = loss(store)?;
            store.get_mut(id).tensor.values_mut()[i] = x0;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let num = (lp - lm) / (2.0 * h);
            let err = relative_error(grad[i], num, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((store.get(id).name.clone(), i, grad[i], num));
                }
            }
        }
    }
    Ok(report)
}
