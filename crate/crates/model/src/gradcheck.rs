//! Central-difference verification of the analytic gradient.

use convsink::{MaskMatrix, TokenId};
use serde::Serialize;

use crate::error::Result;
use crate::model::Transformer;

/// Step sizes outside this range are numerically unreliable in f64.
pub const SAFE_EPS: (f64, f64) = (1e-6, 1e-3);

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    /// Set when `eps` falls outside [`SAFE_EPS`].
    pub precision_warning: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic and numeric gradients of the masked loss.
///
/// `filter` selects tensors by name; `stride` checks every `stride`-th entry of
/// each selected tensor (1 = all).
pub fn grad_check(
    model: &Transformer<f64>,
    ids: &[TokenId],
    mask: &MaskMatrix,
    predict: &[usize],
    eps: f64,
    stride: usize,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    let (_, grad) = model.loss_and_grad(ids, mask, predict)?;
    let names = model.params.names();
    let analytic = grad.tensors();
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        precision_warning: !(SAFE_EPS.0..=SAFE_EPS.1).contains(&eps),
    };
    if report.precision_warning {
        log::warn!("grad_check eps {eps} outside safe range {SAFE_EPS:?}");
    }
    for (t, name) in names.iter().enumerate() {
        if !filter(name) {
            continue;
        }
        let len = analytic[t].len();
        for idx in (0..len).step_by(stride.max(1)) {
            let orig = probe.params.tensors()[t][idx];
            probe.params.tensors_mut()[t][idx] = orig + eps;
            let plus = probe.loss(ids, mask, predict)?;
            probe.params.tensors_mut()[t][idx] = orig - eps;
            let minus = probe.loss(ids, mask, predict)?;
            probe.params.tensors_mut()[t][idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t][idx];
            let rel = rel_err(a, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
