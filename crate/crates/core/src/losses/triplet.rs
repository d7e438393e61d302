use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::common::{pair_grad, similarities};
use super::{validate_batch, Batch, LossResult, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletParams {
    pub margin: f64,
}

impl Default for TripletParams {
    fn default() -> Self {
        Self { margin: 0.1 }
    }
}

/// Mean of `max(0, s_an − s_ap + margin)` over every in-batch triplet
/// (anchor, positive ≠ anchor, negative).
pub fn triplet_loss(batch: &Batch, params: &TripletParams) -> Result<LossResult> {
    validate_batch(batch.embeddings.view(), &batch.labels)?;
    Ok(compute(batch.embeddings.view(), &batch.labels, params))
}

pub(crate) fn compute(x: ArrayView2<f64>, labels: &[usize], params: &TripletParams) -> LossResult {
    let n = labels.len();
    let s = similarities(x);
    let mut g = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for neg in (0..n).filter(|&k| labels[k] != labels[a]) {
                count += 1;
                let h = s[[a, neg]] - s[[a, p]] + params.margin;
                if h > 0.0 {
                    value += h;
                    g[[a, neg]] += 1.0;
                    g[[a, p]] -= 1.0;
                }
            }
        }
    }
    if count == 0 {
        return LossResult::zero(n, x.ncols());
    }
    let scale = 1.0 / count as f64;
    g *= scale;
    LossResult {
        value: value * scale,
        grad_embeddings: pair_grad(&g, x),
        grad_aux: None,
    }
}

pub(crate) fn kink_distance(x: ArrayView2<f64>, labels: &[usize], params: &TripletParams) -> f64 {
    let n = labels.len();
    let s = similarities(x);
    let mut best = f64::INFINITY;
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for neg in (0..n).filter(|&k| labels[k] != labels[a]) {
                best = best.min((s[[a, neg]] - s[[a, p]] + params.margin).abs());
            }
        }
    }
    best
}
