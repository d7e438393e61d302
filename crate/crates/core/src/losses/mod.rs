//! Deep-metric-learning loss kernels with analytic gradients.
//!
//! Every kernel is a pure function of a [`Batch`] (and, for the proxy losses,
//! a bank of class vectors). Pair-based losses read similarities as inner
//! products `s_ij = x_i · x_j`, which are cosine similarities on the unit rows
//! the embedding head produces; gradients are exact derivatives of that
//! function with respect to the rows as given. All arithmetic is `f64` and
//! every softmax-like sum goes through a log-sum-exp.
//!
//! Defaults for circle, multi-similarity, SoftTriple and ProxyNCA++ are the
//! values their original authors recommend.

mod circle;
mod common;
pub mod gradcheck;
mod multisim;
mod proxynca;
mod softtriple;
mod supcon;
mod triplet;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use circle::{circle_loss, CircleParams};
pub use gradcheck::{default_step, finite_diff_check, random_batch_check, GradCheck};
pub use multisim::{multisim_loss, MultiSimParams};
pub use proxynca::{proxynca_loss, ProxyNcaParams};
pub use softtriple::{softtriple_loss, SoftTripleParams};
pub use supcon::{supcon_loss, SupConParams};
pub use triplet::{triplet_loss, TripletParams};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch needs at least 2 rows, got {0}")]
    TooSmall(usize),
    #[error("{labels} labels for {rows} embedding rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("invalid loss parameter: {0}")]
    InvalidParam(String),
    #[error("no {what} for class {class}")]
    MissingClass { what: &'static str, class: usize },
    #[error("bank dimension {bank} differs from embedding dimension {embeddings}")]
    BankDim { bank: usize, embeddings: usize },
    #[error("center bank has {rows} rows, not a multiple of {per_class} centers per class")]
    CenterLayout { rows: usize, per_class: usize },
    #[error("{0} loss needs a proxy/center bank")]
    MissingBank(LossKind),
    #[error("bank row {row} has norm {norm}, not unit")]
    NotUnit { row: usize, norm: f64 },
    #[error("inputs lie within {distance:e} of a non-differentiable point")]
    KinkAdjacent { distance: f64 },
    #[error("could not draw a batch away from non-differentiable points in {0} attempts")]
    NoSmoothSample(usize),
    #[error("unknown loss `{0}`")]
    UnknownLoss(String),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Circle,
    MultiSim,
    SupCon,
    ProxyNca,
    SoftTriple,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Triplet,
        LossKind::Circle,
        LossKind::MultiSim,
        LossKind::SupCon,
        LossKind::ProxyNca,
        LossKind::SoftTriple,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Circle => "circle",
            LossKind::MultiSim => "multisim",
            LossKind::SupCon => "supcon",
            LossKind::ProxyNca => "proxynca",
            LossKind::SoftTriple => "softtriple",
        }
    }

    /// Proxy-based losses carry learned class vectors.
    pub fn uses_bank(self) -> bool {
        matches!(self, LossKind::ProxyNca | LossKind::SoftTriple)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LossError::UnknownLoss(s.to_owned()))
    }
}

/// Embeddings (one row per sample) and their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        validate_batch(embeddings.view(), &labels)?;
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

pub(crate) fn validate_batch(x: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != x.nrows() {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            rows: x.nrows(),
        });
    }
    if x.nrows() < 2 {
        return Err(LossError::TooSmall(x.nrows()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_embeddings: Array2<f64>,
    /// Gradient with respect to the proxy or center bank.
    pub grad_aux: Option<Array2<f64>>,
}

impl LossResult {
    pub(crate) fn zero(rows: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grad_embeddings: Array2::zeros((rows, dim)),
            grad_aux: None,
        }
    }
}

fn check_unit_rows(v: ArrayView2<f64>) -> Result<()> {
    for (row, r) in v.rows().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(LossError::NotUnit { row, norm });
        }
    }
    Ok(())
}

/// One unit vector per class; row `c` is the proxy of class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    vectors: Array2<f64>,
}

impl ProxyBank {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        check_unit_rows(vectors.view())?;
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn classes(&self) -> usize {
        self.vectors.nrows()
    }

    /// Applies `update` then rescales every row back to unit length.
    pub fn update_normalized(&mut self, update: impl FnOnce(&mut Array2<f64>)) {
        update(&mut self.vectors);
        common::normalize_rows(&mut self.vectors);
    }
}

/// `per_class` unit vectors per class; rows `c·J .. (c+1)·J` belong to class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    centers: Array2<f64>,
    per_class: usize,
}

impl CenterBank {
    pub fn new(centers: Array2<f64>, per_class: usize) -> Result<Self> {
        if per_class == 0 || !centers.nrows().is_multiple_of(per_class) {
            return Err(LossError::CenterLayout {
                rows: centers.nrows(),
                per_class,
            });
        }
        check_unit_rows(centers.view())?;
        Ok(Self { centers, per_class })
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn classes(&self) -> usize {
        self.centers.nrows() / self.per_class
    }

    pub fn update_normalized(&mut self, update: impl FnOnce(&mut Array2<f64>)) {
        update(&mut self.centers);
        common::normalize_rows(&mut self.centers);
    }
}

/// Hyperparameters for all six losses; only the block of the selected loss is read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    pub triplet: TripletParams,
    pub circle: CircleParams,
    pub multisim: MultiSimParams,
    pub supcon: SupConParams,
    pub proxynca: ProxyNcaParams,
    pub softtriple: SoftTripleParams,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidParam(format!("{name} must be positive, got {v}")))
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.triplet.margin >= 0.0) {
            return Err(LossError::InvalidParam(format!(
                "triplet margin must be non-negative, got {}",
                self.triplet.margin
            )));
        }
        positive("circle gamma", self.circle.gamma)?;
        positive("multisim alpha", self.multisim.alpha)?;
        positive("multisim beta", self.multisim.beta)?;
        positive("supcon temperature", self.supcon.temperature)?;
        positive("proxynca temperature", self.proxynca.temperature)?;
        positive("softtriple lambda", self.softtriple.lambda)?;
        positive("softtriple gamma", self.softtriple.gamma)?;
        if self.softtriple.centers_per_class == 0 {
            return Err(LossError::InvalidParam("softtriple centers_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// Evaluates `kind` on raw inputs. `bank` is the proxy matrix (ProxyNCA++) or
/// the center matrix (SoftTriple) and is ignored by pair-based losses.
pub fn evaluate(
    kind: LossKind,
    x: ArrayView2<f64>,
    labels: &[usize],
    bank: Option<ArrayView2<f64>>,
    params: &LossParams,
) -> Result<LossResult> {
    validate_batch(x, labels)?;
    match kind {
        LossKind::Triplet => Ok(triplet::compute(x, labels, &params.triplet)),
        LossKind::Circle => Ok(circle::compute(x, labels, &params.circle)),
        LossKind::MultiSim => Ok(multisim::compute(x, labels, &params.multisim)),
        LossKind::SupCon => Ok(supcon::compute(x, labels, &params.supcon)),
        LossKind::ProxyNca => {
            let bank = bank.ok_or(LossError::MissingBank(kind))?;
            proxynca::compute(x, labels, bank, &params.proxynca)
        }
        LossKind::SoftTriple => {
            let bank = bank.ok_or(LossError::MissingBank(kind))?;
            softtriple::compute(x, labels, bank, &params.softtriple)
        }
    }
}

/// Distance, in similarity units, from the nearest non-differentiable point
/// (hinge or mining threshold). Smooth losses report infinity.
pub fn kink_distance(kind: LossKind, x: ArrayView2<f64>, labels: &[usize], params: &LossParams) -> f64 {
    match kind {
        LossKind::Triplet => triplet::kink_distance(x, labels, &params.triplet),
        LossKind::Circle => circle::kink_distance(x, labels, &params.circle),
        LossKind::MultiSim => multisim::kink_distance(x, labels, &params.multisim),
        LossKind::SupCon | LossKind::ProxyNca | LossKind::SoftTriple => f64::INFINITY,
    }
}
