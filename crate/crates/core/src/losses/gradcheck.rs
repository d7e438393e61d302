//! Central-difference verification of the analytic loss gradients.
//!
//! Each coordinate's numeric derivative comes from central differences at a
//! shrinking sequence of steps starting at `eps`, combined by Richardson
//! extrapolation. That keeps truncation error small at steps large enough
//! for roundoff not to swamp coordinates whose true gradient is tiny.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::common::normalize_rows;
use super::{evaluate, kink_distance, Batch, LossError, LossKind, LossParams, Result};
use crate::{par, rng};

/// Inputs closer than this to a hinge or mining threshold are rejected.
pub const MIN_KINK_DISTANCE: f64 = 1e-6;

const MAX_RESAMPLES: usize = 1000;

/// Starting step for [`finite_diff_check`]: larger for the kink-free losses,
/// where only smoothness limits it, smaller where a hinge or mining threshold
/// has to stay out of reach.
pub fn default_step(kind: LossKind) -> f64 {
    match kind {
        LossKind::SupCon | LossKind::ProxyNca | LossKind::SoftTriple => 1e-2,
        LossKind::Triplet | LossKind::Circle | LossKind::MultiSim => 1e-3,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub value: f64,
    /// `max |analytic − numeric| / max(1e-12, |numeric|)` over every coordinate.
    pub max_rel_error: f64,
    /// Largest absolute discrepancy, for diagnostics.
    pub max_abs_error: f64,
    /// Number of coordinates compared (embeddings plus bank, if any).
    pub coordinates: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-12)
}

/// Compares the analytic gradient of `kind` at `batch` (and `bank`, for the
/// proxy losses) against central differences with steps of at most `eps`.
///
/// Fails with [`LossError::KinkAdjacent`] when a hinge or mining threshold is
/// within reach of the perturbation.
pub fn finite_diff_check(
    kind: LossKind,
    batch: &Batch,
    bank: Option<&Array2<f64>>,
    params: &LossParams,
    eps: f64,
) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(LossError::InvalidParam(format!("eps must be positive, got {eps}")));
    }
    let x = &batch.embeddings;
    let labels = &batch.labels;
    // the largest step is eps, which moves a similarity by at most ~2 eps
    let limit = MIN_KINK_DISTANCE.max(4.0 * eps);
    let distance = kink_distance(kind, x.view(), labels, params);
    if distance < limit {
        return Err(LossError::KinkAdjacent { distance });
    }
    let base = evaluate(kind, x.view(), labels, bank.map(|b| b.view()), params)?;

    let n_x = x.len();
    let n_b = if kind.uses_bank() { bank.map_or(0, |b| b.len()) } else { 0 };
    let dim = x.ncols();
    let bank_dim = bank.map_or(1, |b| b.ncols());

    let probe = |coord: usize| -> Result<(f64, f64)> {
        let eval_at = |delta: f64| -> Result<f64> {
            if coord < n_x {
                let mut xp = x.clone();
                xp[[coord / dim, coord % dim]] += delta;
                evaluate(kind, xp.view(), labels, bank.map(|b| b.view()), params).map(|r| r.value)
            } else {
                let c = coord - n_x;
                let mut bp = bank.expect("bank coordinates imply a bank").clone();
                bp[[c / bank_dim, c % bank_dim]] += delta;
                evaluate(kind, x.view(), labels, Some(bp.view()), params).map(|r| r.value)
            }
        };
        let numeric = ridders(|h| Ok((eval_at(h)? - eval_at(-h)?) / (2.0 * h)), eps)?;
        let analytic = if coord < n_x {
            base.grad_embeddings[[coord / dim, coord % dim]]
        } else {
            let c = coord - n_x;
            base.grad_aux.as_ref().map_or(0.0, |g| g[[c / bank_dim, c % bank_dim]])
        };
        Ok((analytic, numeric))
    };

    let pairs = par::map_range(n_x + n_b, probe)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = pairs.iter().map(|&(a, n)| rel_error(a, n)).fold(0.0, f64::max);
    let max_abs_error = pairs.iter().map(|&(a, n)| (a - n).abs()).fold(0.0, f64::max);
    Ok(GradCheck {
        value: base.value,
        max_rel_error,
        max_abs_error,
        coordinates: pairs.len(),
    })
}

/// Richardson extrapolation of the central difference `central(h)` over the
/// steps `eps, eps/1.4, eps/1.4², …` (Ridders' tableau), returning the entry
/// with the smallest error estimate.
fn ridders(central: impl Fn(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const TABLE: usize = 10;
    const SAFE: f64 = 2.0;

    let mut h = eps;
    let mut prev: Vec<f64> = vec![central(h)?];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    for i in 1..TABLE {
        h /= SHRINK;
        let mut row = vec![central(h)?];
        let mut fac = SHRINK2;
        for j in 1..=i {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            row.push(next);
            if e <= err {
                err = e;
                best = next;
            }
        }
        // higher orders got worse: stop
        if (row[i] - prev[i - 1]).abs() >= SAFE * err {
            break;
        }
        prev = row;
    }
    Ok(best)
}

/// Random unit rows, shape `rows × dim`.
pub fn random_unit_rows<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, dim), || rng.sample::<f64, _>(StandardNormal));
    normalize_rows(&mut m);
    m
}

/// A random batch of `size` unit rows over `classes` classes (labels cycle so
/// every class appears) plus, for the proxy losses, a random unit bank.
pub fn random_batch<R: Rng>(
    rng: &mut R,
    kind: LossKind,
    params: &LossParams,
    size: usize,
    dim: usize,
    classes: usize,
) -> (Batch, Option<Array2<f64>>) {
    let x = random_unit_rows(rng, size, dim);
    let labels = (0..size).map(|i| i % classes).collect();
    let bank = match kind {
        LossKind::ProxyNca => Some(random_unit_rows(rng, classes, dim)),
        LossKind::SoftTriple => Some(random_unit_rows(rng, classes * params.softtriple.centers_per_class, dim)),
        _ => None,
    };
    let batch = Batch { embeddings: x, labels };
    (batch, bank)
}

/// Draws random batches from `seed` until one lies away from every kink, then
/// runs [`finite_diff_check`] on it.
pub fn random_batch_check(
    kind: LossKind,
    params: &LossParams,
    size: usize,
    dim: usize,
    classes: usize,
    seed: u64,
    eps: f64,
) -> Result<GradCheck> {
    if size < 2 || classes == 0 || dim == 0 {
        return Err(LossError::TooSmall(size));
    }
    let mut rng = rng::seeded(seed);
    for _ in 0..MAX_RESAMPLES {
        let (batch, bank) = random_batch(&mut rng, kind, params, size, dim, classes);
        match finite_diff_check(kind, &batch, bank.as_ref(), params, eps) {
            Err(LossError::KinkAdjacent { .. }) => continue,
            other => return other,
        }
    }
    Err(LossError::NoSmoothSample(MAX_RESAMPLES))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_and_supcon_small_batches() {
        let p = LossParams::default();
        for kind in [LossKind::Triplet, LossKind::SupCon] {
            let r = random_batch_check(kind, &p, 8, 6, 2, 7, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
        }
    }

    #[test]
    fn kink_adjacent_batch_is_rejected() {
        // s_an − s_ap + margin = 0 exactly
        let x = ndarray::array![[1.0, 0.0], [0.9, 0.0], [0.8, 0.0]];
        let b = Batch::new(x, vec![0, 0, 1]).unwrap();
        let err = finite_diff_check(LossKind::Triplet, &b, None, &LossParams::default(), 1e-5).unwrap_err();
        assert!(matches!(err, LossError::KinkAdjacent { .. }));
    }
}
