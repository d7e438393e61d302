use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::common::{logsumexp, pair_grad, sigmoid, similarities, softmax_with, softplus};
use super::{validate_batch, Batch, LossResult, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiSimParams {
    /// Positive-pair scale `α`.
    pub alpha: f64,
    /// Negative-pair scale `β`.
    pub beta: f64,
    /// Similarity threshold `λ`.
    pub lambda: f64,
    /// Mining margin `ε`.
    pub epsilon: f64,
}

impl Default for MultiSimParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            lambda: 1.0,
            epsilon: 0.1,
        }
    }
}

/// Multi-similarity loss with its pair mining step.
///
/// For anchor `i`, negatives with `s > min_pos − ε` and positives with
/// `s < max_neg + ε` survive; the anchor then contributes
/// `(1/α) log(1 + Σ_P e^{−α(s−λ)}) + (1/β) log(1 + Σ_N e^{β(s−λ)})`.
/// The mean runs over anchors with at least one surviving pair.
pub fn multisim_loss(batch: &Batch, params: &MultiSimParams) -> Result<LossResult> {
    validate_batch(batch.embeddings.view(), &batch.labels)?;
    Ok(compute(batch.embeddings.view(), &batch.labels, params))
}

struct Mined {
    pos: Vec<usize>,
    neg: Vec<usize>,
}

fn mine(s: &Array2<f64>, labels: &[usize], i: usize, eps: f64) -> Option<Mined> {
    let n = labels.len();
    let pos_all: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
    let neg_all: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
    if pos_all.is_empty() || neg_all.is_empty() {
        return None;
    }
    let min_pos = pos_all.iter().map(|&j| s[[i, j]]).fold(f64::INFINITY, f64::min);
    let max_neg = neg_all.iter().map(|&j| s[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
    let neg = neg_all.into_iter().filter(|&k| s[[i, k]] > min_pos - eps).collect();
    let pos = pos_all.into_iter().filter(|&j| s[[i, j]] < max_neg + eps).collect();
    Some(Mined { pos, neg })
}

pub(crate) fn compute(x: ArrayView2<f64>, labels: &[usize], params: &MultiSimParams) -> LossResult {
    let n = labels.len();
    let s = similarities(x);
    let MultiSimParams { alpha, beta, lambda, epsilon } = *params;
    let mut g = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;
    let mut anchors = 0usize;

    for i in 0..n {
        let Some(Mined { pos, neg }) = mine(&s, labels, i, epsilon) else {
            continue;
        };
        if pos.is_empty() && neg.is_empty() {
            continue;
        }
        anchors += 1;
        if !pos.is_empty() {
            let logits: Vec<f64> = pos.iter().map(|&j| -alpha * (s[[i, j]] - lambda)).collect();
            let lse = logsumexp(&logits);
            value += softplus(lse) / alpha;
            let outer = sigmoid(lse);
            for (&j, w) in pos.iter().zip(softmax_with(&logits, lse)) {
                g[[i, j]] -= outer * w;
            }
        }
        if !neg.is_empty() {
            let logits: Vec<f64> = neg.iter().map(|&k| beta * (s[[i, k]] - lambda)).collect();
            let lse = logsumexp(&logits);
            value += softplus(lse) / beta;
            let outer = sigmoid(lse);
            for (&k, w) in neg.iter().zip(softmax_with(&logits, lse)) {
                g[[i, k]] += outer * w;
            }
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

/// Distance of any similarity from its mining threshold.
pub(crate) fn kink_distance(x: ArrayView2<f64>, labels: &[usize], params: &MultiSimParams) -> f64 {
    let n = labels.len();
    let s = similarities(x);
    let mut best = f64::INFINITY;
    for i in 0..n {
        let pos: Vec<f64> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).map(|j| s[[i, j]]).collect();
        let neg: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[i]).map(|j| s[[i, j]]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let min_pos = pos.iter().copied().fold(f64::INFINITY, f64::min);
        let max_neg = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in &neg {
            best = best.min((v - (min_pos - params.epsilon)).abs());
        }
        for v in &pos {
            best = best.min((v - (max_neg + params.epsilon)).abs());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn well_separated_batch_mines_nothing() {
        // positives at similarity 1, negatives at 0: gap 1 > ε
        let x = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let b = Batch::new(x, vec![0, 0, 1, 1]).unwrap();
        let r = multisim_loss(&b, &MultiSimParams::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_class_is_zero() {
        let b = Batch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 0]).unwrap();
        assert_eq!(multisim_loss(&b, &MultiSimParams::default()).unwrap().value, 0.0);
    }

    #[test]
    fn three_points_match_scalar_formula() {
        // 0,1 same class; 2 other. s01 = 0.6, s02 = 0.8, s12 = 0.
        let x = array![[1.0, 0.0], [0.6, 0.8], [0.8, -0.6]];
        let p = MultiSimParams::default();
        let b = Batch::new(x, vec![0, 0, 1]).unwrap();
        let r = multisim_loss(&b, &p).unwrap();
        let term = |pos: &[f64], neg: &[f64]| {
            let lp = (1.0 + pos.iter().map(|s| (-p.alpha * (s - p.lambda)).exp()).sum::<f64>()).ln() / p.alpha;
            let ln = (1.0 + neg.iter().map(|s| (p.beta * (s - p.lambda)).exp()).sum::<f64>()).ln() / p.beta;
            lp + ln
        };
        // anchor 0: min_pos 0.6, max_neg 0.8 → keep neg 0.8 (> 0.5), keep pos 0.6 (< 0.9)
        let l0 = term(&[0.6], &[0.8]);
        // anchor 1: min_pos 0.6, max_neg 0.0 → neg 0.0 dropped (not > 0.5), pos 0.6 dropped (not < 0.1)
        // anchor 2: no positives
        assert!((r.value - l0).abs() < 1e-13, "{} vs {l0}", r.value);
    }
}
