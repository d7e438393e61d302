use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::common::{logsumexp, softmax_with};
use super::{validate_batch, Batch, CenterBank, LossError, LossResult, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftTripleParams {
    /// Scale of the class softmax.
    pub lambda: f64,
    /// Temperature of the softmax over a class's centers.
    pub gamma: f64,
    /// Margin subtracted from the true-class similarity.
    pub delta: f64,
    /// Weight of the center regularizer.
    pub tau_reg: f64,
    /// Centers per class, `J`.
    pub centers_per_class: usize,
}

impl Default for SoftTripleParams {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            gamma: 0.1,
            delta: 0.01,
            tau_reg: 0.2,
            centers_per_class: 5,
        }
    }
}

/// SoftTriple loss.
///
/// The relaxed similarity of sample `x` to class `c` is
/// `s_c = Σ_j softmax_j(x·w_cj / γ) · x·w_cj`; each sample contributes
/// `−log softmax(λ (s_c − δ [c = y]))_y`, averaged over the batch, plus
/// `τ_reg Σ_c Σ_{j<j'} sqrt(2 − 2 w_cj·w_cj') / (C J (J − 1))`.
pub fn softtriple_loss(batch: &Batch, centers: &CenterBank, params: &SoftTripleParams) -> Result<LossResult> {
    validate_batch(batch.embeddings.view(), &batch.labels)?;
    if centers.per_class() != params.centers_per_class {
        return Err(LossError::CenterLayout {
            rows: centers.centers().nrows(),
            per_class: params.centers_per_class,
        });
    }
    compute(batch.embeddings.view(), &batch.labels, centers.centers().view(), params)
}

pub(crate) fn compute(
    x: ArrayView2<f64>,
    labels: &[usize],
    centers: ArrayView2<f64>,
    params: &SoftTripleParams,
) -> Result<LossResult> {
    let (n, d) = x.dim();
    let j_per = params.centers_per_class;
    if j_per == 0 || !centers.nrows().is_multiple_of(j_per) {
        return Err(LossError::CenterLayout {
            rows: centers.nrows(),
            per_class: j_per,
        });
    }
    if centers.ncols() != d {
        return Err(LossError::BankDim {
            bank: centers.ncols(),
            embeddings: d,
        });
    }
    let classes = centers.nrows() / j_per;
    if let Some(&class) = labels.iter().find(|&&y| y >= classes) {
        return Err(LossError::MissingClass { what: "centers", class });
    }

    let SoftTripleParams { lambda, gamma, delta, tau_reg, .. } = *params;
    // t[i, r] = x_i · w_r over all center rows r
    let t = x.dot(&centers.t());
    let mut gx = Array2::<f64>::zeros((n, d));
    let mut gw = Array2::<f64>::zeros(centers.dim());
    let mut value = 0.0;

    for i in 0..n {
        let y = labels[i];
        let mut rel = vec![0.0; classes];
        // ds_c/dt_j for each center row
        let mut dsdt = vec![0.0; centers.nrows()];
        for c in 0..classes {
            let row = &t.row(i).to_vec()[c * j_per..(c + 1) * j_per];
            let scaled: Vec<f64> = row.iter().map(|v| v / gamma).collect();
            let q = softmax_with(&scaled, logsumexp(&scaled));
            let s: f64 = q.iter().zip(row).map(|(q, t)| q * t).sum();
            rel[c] = s;
            for (j, (&qj, &tj)) in q.iter().zip(row).enumerate() {
                dsdt[c * j_per + j] = qj * (1.0 + (tj - s) / gamma);
            }
        }
        let logits: Vec<f64> = rel
            .iter()
            .enumerate()
            .map(|(c, &s)| lambda * (s - if c == y { delta } else { 0.0 }))
            .collect();
        let lse = logsumexp(&logits);
        value += lse - logits[y];
        for (c, w) in softmax_with(&logits, lse).into_iter().enumerate() {
            let g_c = lambda * (w - if c == y { 1.0 } else { 0.0 });
            for j in 0..j_per {
                let r = c * j_per + j;
                let coef = g_c * dsdt[r];
                if coef == 0.0 {
                    continue;
                }
                gx.row_mut(i).scaled_add(coef, &centers.row(r));
                gw.row_mut(r).scaled_add(coef, &x.row(i));
            }
        }
    }

    let scale = 1.0 / n as f64;
    value *= scale;
    gx *= scale;
    gw *= scale;

    if tau_reg != 0.0 && j_per > 1 {
        let norm = tau_reg / (classes * j_per * (j_per - 1)) as f64;
        for c in 0..classes {
            for a in 0..j_per {
                for b in (a + 1)..j_per {
                    let (ra, rb) = (c * j_per + a, c * j_per + b);
                    let u = (2.0 - 2.0 * centers.row(ra).dot(&centers.row(rb))).max(0.0);
                    let root = u.sqrt();
                    value += norm * root;
                    if root > 0.0 {
                        // d sqrt(u) / d w_a = −w_b / sqrt(u)
                        gw.row_mut(ra).scaled_add(-norm / root, &centers.row(rb));
                        gw.row_mut(rb).scaled_add(-norm / root, &centers.row(ra));
                    }
                }
            }
        }
    }

    Ok(LossResult {
        value,
        grad_embeddings: gx,
        grad_aux: Some(gw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_class_without_regularizer_is_zero() {
        let b = Batch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 0]).unwrap();
        let centers = CenterBank::new(array![[1.0, 0.0], [0.6, 0.8]], 2).unwrap();
        let p = SoftTripleParams { tau_reg: 0.0, centers_per_class: 2, ..Default::default() };
        let r = softtriple_loss(&b, &centers, &p).unwrap();
        // softmax over one class with margin: −log(1) = 0
        assert!(r.value.abs() < 1e-15);
    }

    #[test]
    fn one_center_reduces_to_dot_product() {
        // with J = 1, s_c = x · w_c, so the loss is a plain softmax over λ(x·w_c − δ[c=y])
        let x = array![[0.6, 0.8], [1.0, 0.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let p = SoftTripleParams { centers_per_class: 1, ..Default::default() };
        let b = Batch::new(x.clone(), vec![0, 1]).unwrap();
        let r = softtriple_loss(&b, &CenterBank::new(w.clone(), 1).unwrap(), &p).unwrap();
        let mut expected = 0.0;
        for (i, y) in [0usize, 1].into_iter().enumerate() {
            let l: Vec<f64> = (0..2)
                .map(|c| p.lambda * (x.row(i).dot(&w.row(c)) - if c == y { p.delta } else { 0.0 }))
                .collect();
            expected += -(l[y].exp() / (l[0].exp() + l[1].exp())).ln();
        }
        assert!((r.value - expected / 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_class_two_center_scalar_reference() {
        let s = 1.0 / 3f64.sqrt();
        let x = array![[1.0, 0.0, 0.0], [s, s, s]];
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.8, 0.0]];
        let p = SoftTripleParams { centers_per_class: 2, ..Default::default() };
        let b = Batch::new(x.clone(), vec![0, 1]).unwrap();
        let r = softtriple_loss(&b, &CenterBank::new(w.clone(), 2).unwrap(), &p).unwrap();

        let relaxed = |i: usize, c: usize| {
            let t: Vec<f64> = (0..2).map(|j| x.row(i).dot(&w.row(2 * c + j))).collect();
            let e: Vec<f64> = t.iter().map(|v| (v / p.gamma).exp()).collect();
            let z: f64 = e.iter().sum();
            t.iter().zip(&e).map(|(t, e)| t * e / z).sum::<f64>()
        };
        let mut expected = 0.0;
        for (i, y) in [0usize, 1].into_iter().enumerate() {
            let l: Vec<f64> = (0..2).map(|c| p.lambda * (relaxed(i, c) - if c == y { p.delta } else { 0.0 })).collect();
            expected += -(l[y].exp() / (l[0].exp() + l[1].exp())).ln();
        }
        expected /= 2.0;
        let reg = |a: usize, b: usize| (2.0 - 2.0 * w.row(a).dot(&w.row(b))).sqrt();
        expected += p.tau_reg * (reg(0, 1) + reg(2, 3)) / (2.0 * 2.0 * 1.0);
        assert!((r.value - expected).abs() < 1e-12, "{} vs {expected}", r.value);
    }

    #[test]
    fn missing_centers_error() {
        let b = Batch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 3]).unwrap();
        let centers = CenterBank::new(array![[1.0, 0.0], [0.0, 1.0]], 1).unwrap();
        let p = SoftTripleParams { centers_per_class: 1, ..Default::default() };
        assert!(matches!(softtriple_loss(&b, &centers, &p), Err(LossError::MissingClass { class: 3, .. })));
    }
}
