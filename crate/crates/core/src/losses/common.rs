use ndarray::{Array2, ArrayView2};

/// `log Σ exp(v)`; `-inf` for an empty slice.
pub(crate) fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|&a| (a - max).exp()).sum::<f64>().ln()
}

/// Softmax weights of `v`, given its log-sum-exp.
pub(crate) fn softmax_with(v: &[f64], lse: f64) -> Vec<f64> {
    v.iter().map(|&a| (a - lse).exp()).collect()
}

/// `log(1 + e^z)`
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gram matrix `X Xᵀ`.
pub(crate) fn similarities(x: ArrayView2<f64>) -> Array2<f64> {
    x.dot(&x.t())
}

/// Maps `dL/ds_ij` (for `s_ij = x_i · x_j`) to `dL/dX = (G + Gᵀ) X`.
pub(crate) fn pair_grad(g: &Array2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let sym = g + &g.t();
    sym.dot(&x)
}

pub(crate) fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
