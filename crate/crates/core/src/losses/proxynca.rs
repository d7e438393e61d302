use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::common::{logsumexp, softmax_with};
use super::{validate_batch, Batch, LossError, LossResult, ProxyBank, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyNcaParams {
    /// Softmax temperature `T`.
    pub temperature: f64,
}

impl Default for ProxyNcaParams {
    fn default() -> Self {
        Self { temperature: 1.0 / 9.0 }
    }
}

/// ProxyNCA++: per sample `−log softmax_c(−‖x_i − f_c‖² / T)` at the sample's
/// own class, averaged over the batch. Gradients are returned for the
/// embeddings and for the proxy bank (`grad_aux`).
pub fn proxynca_loss(batch: &Batch, proxies: &ProxyBank, params: &ProxyNcaParams) -> Result<LossResult> {
    validate_batch(batch.embeddings.view(), &batch.labels)?;
    compute(batch.embeddings.view(), &batch.labels, proxies.vectors().view(), params)
}

pub(crate) fn compute(
    x: ArrayView2<f64>,
    labels: &[usize],
    proxies: ArrayView2<f64>,
    params: &ProxyNcaParams,
) -> Result<LossResult> {
    let (n, d) = x.dim();
    let classes = proxies.nrows();
    if proxies.ncols() != d {
        return Err(LossError::BankDim {
            bank: proxies.ncols(),
            embeddings: d,
        });
    }
    if let Some(&class) = labels.iter().find(|&&y| y >= classes) {
        return Err(LossError::MissingClass { what: "proxy", class });
    }
    let inv_t = 1.0 / params.temperature;
    let mut gx = Array2::<f64>::zeros((n, d));
    let mut gp = Array2::<f64>::zeros((classes, d));
    let mut value = 0.0;

    for i in 0..n {
        let xi = x.row(i);
        let dist: Vec<f64> = proxies
            .rows()
            .into_iter()
            .map(|p| xi.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let logits: Vec<f64> = dist.iter().map(|d2| -d2 * inv_t).collect();
        let lse = logsumexp(&logits);
        value += lse - logits[labels[i]];
        // dL/d(d²_c) = ([c = y] − softmax_c) / T
        for (c, w) in softmax_with(&logits, lse).into_iter().enumerate() {
            let coef = (if c == labels[i] { 1.0 } else { 0.0 } - w) * inv_t;
            if coef == 0.0 {
                continue;
            }
            let p = proxies.row(c);
            for k in 0..d {
                let diff = xi[k] - p[k];
                gx[[i, k]] += 2.0 * coef * diff;
                gp[[c, k]] -= 2.0 * coef * diff;
            }
        }
    }

    let scale = 1.0 / n as f64;
    gx *= scale;
    gp *= scale;
    Ok(LossResult {
        value: value * scale,
        grad_embeddings: gx,
        grad_aux: Some(gp),
    })
}
