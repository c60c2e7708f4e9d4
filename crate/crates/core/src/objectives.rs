//! Masked-patch pixel and feature losses and their weighted combination.

use crate::error::{contract_err, Error, Result};
use crate::masking::MaskPlan;
use crate::nn::LN_EPS;
use crate::tensor::{Real, Tensor, Var};

/// Per-patch standardized pixels of the masked patches, `[N_m, P*P*C]`.
pub fn pixel_target<T: Real>(patches: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
    let rows = patches.select_rows(plan.masked())?;
    let width = patches.shape()[1];
    let mut data = rows.into_data();
    for row in data.chunks_mut(width.max(1)) {
        let n = T::of(width as f64);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * inv;
        }
    }
    Ok(Tensor::new(vec![plan.n_masked(), width], data)?)
}

/// Target rows for a subset of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets<T> {
    /// Grid indices the rows belong to; each must be masked.
    pub indices: Vec<usize>,
    pub rows: Tensor<T>,
}

impl<T: Real> Targets<T> {
    /// Rows of a full `[N, d]` table at every masked index.
    pub fn masked_rows(full: &Tensor<T>, plan: &MaskPlan) -> Result<Self> {
        if full.shape()[0] != plan.n() {
            return Err(contract_err!("target table has {} rows for {} patches", full.shape()[0], plan.n()));
        }
        Ok(Self {
            indices: plan.masked().to_vec(),
            rows: full.select_rows(plan.masked())?,
        })
    }
}

/// A masked loss and whether it was vacuous.
#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss<'g, T> {
    pub value: Var<'g, T>,
    /// No patch contributed; `value` is a constant zero.
    pub empty: bool,
}

/// Weighted mean over target rows of the per-row mean squared error.
fn masked_mse<'g, T: Real>(
    pred: Var<'g, T>,
    targets: &Targets<T>,
    plan: &MaskPlan,
) -> Result<MaskedLoss<'g, T>> {
    let g = pred.graph();
    let k = targets.indices.len();
    if targets.rows.shape()[0] != k {
        return Err(contract_err!("{} target rows for {k} indices", targets.rows.shape()[0]));
    }
    if k == 0 {
        return Ok(MaskedLoss {
            value: g.constant(Tensor::scalar(T::zero())),
            empty: true,
        });
    }
    let ps = pred.shape();
    if ps.len() != 2 || ps[0] != plan.n() || ps[1] != targets.rows.shape()[1] {
        return Err(contract_err!(
            "prediction {ps:?} vs target rows {:?} on {} patches",
            targets.rows.shape(),
            plan.n()
        ));
    }
    let mut weights = Vec::with_capacity(k);
    for &i in &targets.indices {
        let pos = plan
            .masked()
            .binary_search(&i)
            .map_err(|_| contract_err!("target index {i} is not masked"))?;
        weights.push(T::of(plan.weights()[pos]));
    }
    let diff = pred.gather(&targets.indices)?.sub(g.constant(targets.rows.clone()))?;
    let per_row = diff.mul(diff)?.mean_axis(1)?;
    let weighted = per_row.mul(g.constant(Tensor::new(vec![k], weights)?))?;
    Ok(MaskedLoss {
        value: weighted.sum_all().scale(T::one() / T::of(k as f64)),
        empty: false,
    })
}

/// Pixel loss over masked patches; `target` rows follow `plan.masked()`.
pub fn loss_regression<'g, T: Real>(
    x_bar: Var<'g, T>,
    target: &Tensor<T>,
    plan: &MaskPlan,
) -> Result<MaskedLoss<'g, T>> {
    let targets = Targets {
        indices: plan.masked().to_vec(),
        rows: target.clone(),
    };
    masked_mse(x_bar, &targets, plan)
}

/// Feature loss against detached targets on the given masked patches.
pub fn loss_prediction<'g, T: Real>(
    f_bar: Var<'g, T>,
    targets: &Targets<T>,
    plan: &MaskPlan,
) -> Result<MaskedLoss<'g, T>> {
    masked_mse(f_bar, targets, plan)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_p: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn loss_total(l_r: f64, l_p: f64, lambda: f64) -> Result<LossBreakdown> {
    let total = l_r + lambda * l_p;
    if !(l_r.is_finite() && l_p.is_finite() && lambda.is_finite() && total.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss: L_R={l_r} L_P={l_p} lambda={lambda}"
        )));
    }
    Ok(LossBreakdown { l_r, l_p, lambda, total })
}
