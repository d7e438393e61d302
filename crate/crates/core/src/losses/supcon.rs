use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::common::{logsumexp, pair_grad, similarities, softmax_with};
use super::{validate_batch, Batch, LossResult, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupConParams {
    /// Temperature `τ`.
    pub temperature: f64,
}

impl Default for SupConParams {
    fn default() -> Self {
        Self { temperature: 0.05 }
    }
}

/// Supervised contrastive loss, "out" variant, on an already materialized
/// multiview batch:
///
/// `L_i = −(1/|P(i)|) Σ_{p∈P(i)} log softmax_{a≠i}(s_ia / τ)_p`,
/// averaged over anchors with a non-empty positive set.
pub fn supcon_loss(batch: &Batch, params: &SupConParams) -> Result<LossResult> {
    validate_batch(batch.embeddings.view(), &batch.labels)?;
    Ok(compute(batch.embeddings.view(), &batch.labels, params))
}

pub(crate) fn compute(x: ArrayView2<f64>, labels: &[usize], params: &SupConParams) -> LossResult {
    let n = labels.len();
    let s = similarities(x);
    let inv_t = 1.0 / params.temperature;
    let mut g = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;
    let mut anchors = 0usize;

    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&a| a != i).collect();
        let n_pos = others.iter().filter(|&&a| labels[a] == labels[i]).count();
        if n_pos == 0 {
            continue;
        }
        anchors += 1;
        let logits: Vec<f64> = others.iter().map(|&a| s[[i, a]] * inv_t).collect();
        let lse = logsumexp(&logits);
        let inv_pos = 1.0 / n_pos as f64;
        let mut pos_sum = 0.0;
        for ((&a, &l), w) in others.iter().zip(&logits).zip(softmax_with(&logits, lse)) {
            let is_pos = labels[a] == labels[i];
            if is_pos {
                pos_sum += l;
            }
            g[[i, a]] += (w - if is_pos { inv_pos } else { 0.0 }) * inv_t;
        }
        value += lse - pos_sum * inv_pos;
    }

    if anchors == 0 {
        return LossResult::zero(n, x.ncols());
    }
    let scale = 1.0 / anchors as f64;
    g *= scale;
    LossResult {
        value: value * scale,
        grad_embeddings: pair_grad(&g, x),
        grad_aux: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_same_class_samples_give_zero() {
        for t in [1e-3, 0.05, 1.0, 10.0] {
            let b = Batch::new(array![[1.0, 0.0], [0.6, 0.8]], vec![4, 4]).unwrap();
            let r = supcon_loss(&b, &SupConParams { temperature: t }).unwrap();
            assert!(r.value.abs() < 1e-12, "τ = {t}: {}", r.value);
        }
    }

    #[test]
    fn four_samples_match_scalar_formula() {
        let x = array![[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-0.6, 0.8]];
        let labels = [0, 0, 1, 1];
        let t = 0.05;
        let b = Batch::new(x.clone(), labels.to_vec()).unwrap();
        let r = supcon_loss(&b, &SupConParams { temperature: t }).unwrap();
        // each anchor has exactly one positive: L_i = −log(e^{s_ip/τ} / Σ_{a≠i} e^{s_ia/τ})
        let dot = |i: usize, j: usize| x[[i, 0]] * x[[j, 0]] + x[[i, 1]] * x[[j, 1]];
        let mut total = 0.0;
        for i in 0..4 {
            let p = (0..4).find(|&j| j != i && labels[j] == labels[i]).unwrap();
            let denom: f64 = (0..4).filter(|&a| a != i).map(|a| (dot(i, a) / t).exp()).sum();
            total += -((dot(i, p) / t).exp() / denom).ln();
        }
        assert!((r.value - total / 4.0).abs() < 1e-12, "{} vs {}", r.value, total / 4.0);
    }

    #[test]
    fn anchors_without_positives_are_excluded() {
        let b = Batch::new(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], vec![0, 1, 2]).unwrap();
        let r = supcon_loss(&b, &SupConParams::default()).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn tiny_temperature_is_finite() {
        let b = Batch::new(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], vec![0, 0, 1, 1]).unwrap();
        let r = supcon_loss(&b, &SupConParams { temperature: 1e-3 }).unwrap();
        assert!(r.value.is_finite() && r.value >= 0.0);
        assert!(r.grad_embeddings.iter().all(|v| v.is_finite()));
    }
}
