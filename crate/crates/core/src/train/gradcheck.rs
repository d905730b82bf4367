//! Central finite-difference check of the draft's analytic gradients.

use serde::Serialize;

use super::draft_batch_gradient;
use crate::error::Result;
use crate::model::{DraftModel, TargetModel};
use crate::par;
use crate::tensor::TokenId;

pub const FD_STEP: f64 = 1e-6;

/// Denominator floor for the relative error. Below this magnitude both
/// gradients are treated as zero and the difference is measured absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn group(&self, name: &str) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares every analytic gradient element with `(L(w+h) - L(w-h)) / 2h`,
/// where `L` is the mean token cross-entropy over `batch`.
pub fn grad_check(draft: &DraftModel, target: &TargetModel, batch: &[Vec<TokenId>]) -> Result<GradCheckReport> {
    let (_, analytic) = draft_batch_gradient(draft, target, batch)?;
    let loss_at = |m: &DraftModel| -> Result<f64> { Ok(draft_batch_gradient(m, target, batch)?.0) };
    let named = draft.decoder.named_params();
    let mut groups = Vec::with_capacity(named.len());
    for (gi, ((name, p), (_, g))) in named.iter().zip(analytic.named_params()).enumerate() {
        let diffs = par::map_range(p.data().len(), |k| -> Result<(f64, f64, f64)> {
            let mut plus = draft.clone();
            let w = p.data()[k];
            plus.decoder.params_mut()[gi].data_mut()[k] = w + FD_STEP;
            let mut minus = draft.clone();
            minus.decoder.params_mut()[gi].data_mut()[k] = w - FD_STEP;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * FD_STEP);
            let a = g.data()[k];
            Ok((relative_error(a, numeric), (a - numeric).abs(), a.abs()))
        });
        let mut e = GroupError {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_abs_grad: 0.0,
        };
        for d in diffs {
            let (r, a, m) = d?;
            e.max_rel_error = e.max_rel_error.max(r);
            e.max_abs_error = e.max_abs_error.max(a);
            e.max_abs_grad = e.max_abs_grad.max(m);
        }
        groups.push(e);
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, groups })
}
