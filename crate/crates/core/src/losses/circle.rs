use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::common::{logsumexp, pair_grad, sigmoid, similarities, softmax_with, softplus};
use super::{validate_batch, Batch, LossResult, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleParams {
    /// Relaxation margin `m`.
    pub m: f64,
    /// Scale `γ`.
    pub gamma: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self { m: 0.4, gamma: 80.0 }
    }
}

/// Per anchor with at least one positive and one negative:
///
/// `log(1 + Σ_n exp(γ α_n (s_n − Δ_n)) · Σ_p exp(−γ α_p (s_p − Δ_p)))`
///
/// with `α_p = [1 + m − s_p]₊`, `α_n = [s_n + m]₊`, `Δ_p = 1 − m`, `Δ_n = m`,
/// averaged over those anchors. The weights `α` are differentiated through,
/// so the gradient is the exact derivative of the reported value.
pub fn circle_loss(batch: &Batch, params: &CircleParams) -> Result<LossResult> {
    validate_batch(batch.embeddings.view(), &batch.labels)?;
    Ok(compute(batch.embeddings.view(), &batch.labels, params))
}

pub(crate) fn compute(x: ArrayView2<f64>, labels: &[usize], params: &CircleParams) -> LossResult {
    let n = labels.len();
    let s = similarities(x);
    let (m, gamma) = (params.m, params.gamma);
    let (delta_p, delta_n) = (1.0 - m, m);
    let mut g = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;
    let mut anchors = 0usize;

    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        anchors += 1;

        // logits and their derivatives w.r.t. the similarity
        let mut neg_logit = Vec::with_capacity(neg.len());
        let mut neg_slope = Vec::with_capacity(neg.len());
        for &k in &neg {
            let sk = s[[i, k]];
            let raw = sk + m;
            let (alpha, dalpha) = if raw > 0.0 { (raw, 1.0) } else { (0.0, 0.0) };
            neg_logit.push(gamma * alpha * (sk - delta_n));
            neg_slope.push(gamma * (dalpha * (sk - delta_n) + alpha));
        }
        let mut pos_logit = Vec::with_capacity(pos.len());
        let mut pos_slope = Vec::with_capacity(pos.len());
        for &j in &pos {
            let sj = s[[i, j]];
            let raw = 1.0 + m - sj;
            let (alpha, dalpha) = if raw > 0.0 { (raw, -1.0) } else { (0.0, 0.0) };
            pos_logit.push(-gamma * alpha * (sj - delta_p));
            pos_slope.push(-gamma * (dalpha * (sj - delta_p) + alpha));
        }

        let lse_n = logsumexp(&neg_logit);
        let lse_p = logsumexp(&pos_logit);
        let z = lse_n + lse_p;
        value += softplus(z);
        let outer = sigmoid(z);
        for ((&k, w), slope) in neg.iter().zip(softmax_with(&neg_logit, lse_n)).zip(&neg_slope) {
            g[[i, k]] += outer * w * slope;
        }
        for ((&j, w), slope) in pos.iter().zip(softmax_with(&pos_logit, lse_p)).zip(&pos_slope) {
            g[[i, j]] += outer * w * slope;
        }
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

pub(crate) fn kink_distance(x: ArrayView2<f64>, labels: &[usize], params: &CircleParams) -> f64 {
    let n = labels.len();
    let s = similarities(x);
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let d = if labels[j] == labels[i] {
                (1.0 + params.m - s[[i, j]]).abs()
            } else {
                (s[[i, j]] + params.m).abs()
            };
            best = best.min(d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn no_negatives_is_zero() {
        let b = Batch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![1, 1]).unwrap();
        let r = circle_loss(&b, &CircleParams::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_embeddings.iter().all(|&v| v == 0.0));
    }

    /// Direct evaluation of the formula, no stabilization.
    fn scalar(sp: &[f64], sn: &[f64], m: f64, gamma: f64) -> f64 {
        let neg: f64 = sn.iter().map(|&s| (gamma * (s + m).max(0.0) * (s - m)).exp()).sum();
        let pos: f64 = sp.iter().map(|&s| (-gamma * (1.0 + m - s).max(0.0) * (s - (1.0 - m))).exp()).sum();
        (1.0 + neg * pos).ln()
    }

    #[test]
    fn two_class_pair_matches_scalar_formula() {
        // 3 points: 0 and 1 share a class, 2 is the negative
        let x = array![[1.0, 0.0], [0.8, 0.6], [0.6, -0.8]];
        let b = Batch::new(x, vec![0, 0, 1]).unwrap();
        let p = CircleParams { m: 0.4, gamma: 80.0 };
        let r = circle_loss(&b, &p).unwrap();
        // anchors 0 and 1 each have one positive (s = 0.8) and one negative
        let l0 = scalar(&[0.8], &[0.6], p.m, p.gamma);
        let l1 = scalar(&[0.8], &[0.8 * 0.6 - 0.6 * 0.8], p.m, p.gamma);
        assert!((r.value - (l0 + l1) / 2.0).abs() < 1e-10 * (l0 + l1), "{} vs {}", r.value, (l0 + l1) / 2.0);
    }

    #[test]
    fn large_scale_stays_finite() {
        let x = array![[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]];
        let b = Batch::new(x, vec![0, 0, 1, 1]).unwrap();
        let r = circle_loss(&b, &CircleParams { m: 0.25, gamma: 1e4 }).unwrap();
        assert!(r.value.is_finite() && r.value > 0.0);
        assert!(r.grad_embeddings.iter().all(|v| v.is_finite()));
    }
}
