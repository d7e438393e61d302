//! A small embedding head trained with any of the loss kernels.
//!
//! The head maps input features through an affine-free layer norm, a linear
//! projection `W x + b`, and L2 normalization. Training samples `m × k`
//! class-balanced batches from the `train` split, backpropagates the loss
//! analytically through all three stages, and updates with SGD plus momentum.
//! Proxy and center banks get their own learning rate and are projected back
//! onto the unit sphere after every step. After each epoch the head is scored
//! on `val_ss` and the epoch with the best R@1 is kept.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::embedstore::{EmbedError, EmbeddingMatrix};
use crate::linkeval::{self, EvalError, EvalOptions, LinkOracle};
use crate::losses::{self, LossError, LossKind, LossParams};
use crate::rng::{self, SplitMix64};
use crate::splitgen::{SplitAssignment, SplitName};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TOY1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("need {needed} classes with at least {k} images, found {eligible}")]
    TooFewClasses { eligible: usize, needed: usize, k: usize },
    #[error("no input features for image `{0}`")]
    MissingFeatures(String),
    #[error("feature dimension {found} differs from model input {expected}")]
    FeatureDim { found: usize, expected: usize },
    #[error("loss is not finite ({value}) at epoch {epoch}, step {step}")]
    NonFiniteLoss { value: f64, epoch: usize, step: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Classes per batch (`m`) and images per class (`k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub m: usize,
    pub k: usize,
}

impl BatchSpec {
    pub fn size(&self) -> usize {
        self.m * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.k < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "batch needs m ≥ 2 and k ≥ 2, got m = {}, k = {}",
                self.m, self.k
            )));
        }
        Ok(())
    }
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { m: 8, k: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// `d_out × d_in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub ln_eps: f64,
}

/// Intermediate values kept for the backward pass.
struct Forward {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    z_norm: Array1<f64>,
    y: Array2<f64>,
}

/// Gradients of a loss with respect to the head and the loss's own bank.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub value: f64,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub aux: Option<Array2<f64>>,
}

impl ToyModel {
    pub fn new(w: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        if w.nrows() < 2 || w.ncols() == 0 {
            return Err(TrainError::InvalidConfig(format!("head shape {:?} needs d_out ≥ 2, d_in ≥ 1", w.dim())));
        }
        if b.len() != w.nrows() {
            return Err(TrainError::InvalidConfig(format!("bias length {} for d_out {}", b.len(), w.nrows())));
        }
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(TrainError::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Self { w, b, ln_eps: 1e-5 })
    }

    /// Weights and bias uniform in `±1/√d_in`.
    pub fn init(d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 {
            return Err(TrainError::InvalidConfig("d_in must be at least 1".into()));
        }
        let mut rng = rng::seeded(seed);
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((d_out, d_in), || rng.random_range(-bound..bound));
        let b = Array1::from_shape_simple_fn(d_out, || rng.random_range(-bound..bound));
        Self::new(w, b)
    }

    pub fn d_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w.nrows()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.d_in() {
            return Err(TrainError::FeatureDim {
                found: x.ncols(),
                expected: self.d_in(),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> Forward {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            *s = 1.0 / (var + self.ln_eps).sqrt();
            row *= *s;
        }
        let mut y = xhat.dot(&self.w.t()) + &self.b;
        let mut z_norm = Array1::zeros(x.nrows());
        for (mut row, r) in y.rows_mut().into_iter().zip(z_norm.iter_mut()) {
            *r = row.dot(&row).sqrt();
            // a zero row stays zero rather than dividing by zero
            let scale = if *r > 0.0 { 1.0 / *r } else { 0.0 };
            row *= scale;
        }
        Forward { xhat, inv_std, z_norm, y }
    }

    /// Unit-norm embeddings of the rows of `x`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).y)
    }

    /// Backpropagates `dy` (gradient w.r.t. the output rows) to `(dW, db)`.
    fn backward(&self, f: &Forward, dy: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let mut dz = dy.clone();
        for ((mut g, y), &r) in dz.rows_mut().into_iter().zip(f.y.rows()).zip(&f.z_norm) {
            if r == 0.0 {
                g.fill(0.0);
                continue;
            }
            let proj = y.dot(&g);
            g.scaled_add(-proj, &y);
            g /= r;
        }
        let dw = dz.t().dot(&f.xhat);
        let db = dz.sum_axis(Axis(0));
        (dw, db)
    }

    /// Gradient of the input rows, through the layer norm. Not needed for
    /// training; exposed for checking the backward pass end to end.
    pub fn input_grad(&self, x: ArrayView2<f64>, dy: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let f = self.forward_cached(x);
        let mut dz = dy.clone();
        for ((mut g, y), &r) in dz.rows_mut().into_iter().zip(f.y.rows()).zip(&f.z_norm) {
            if r == 0.0 {
                g.fill(0.0);
                continue;
            }
            let proj = y.dot(&g);
            g.scaled_add(-proj, &y);
            g /= r;
        }
        let mut dxhat = dz.dot(&self.w);
        let d = x.ncols() as f64;
        for ((mut g, xh), &s) in dxhat.rows_mut().into_iter().zip(f.xhat.rows()).zip(&f.inv_std) {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            for (gi, &xi) in g.iter_mut().zip(xh.iter()) {
                *gi = s * (*gi - mean_g - xi * mean_gx);
            }
        }
        Ok(dxhat)
    }

    /// Loss value and gradients for a batch of raw features.
    pub fn loss_and_grad(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        kind: LossKind,
        params: &LossParams,
        bank: Option<ArrayView2<f64>>,
    ) -> Result<HeadGrad> {
        self.check_input(x)?;
        let f = self.forward_cached(x);
        let r = losses::evaluate(kind, f.y.view(), labels, bank, params)?;
        let (w, b) = self.backward(&f, &r.grad_embeddings);
        Ok(HeadGrad {
            value: r.value,
            w,
            b,
            aux: r.grad_aux,
        })
    }

    /// Embeds every row of `features` (same ids, unit rows).
    pub fn embed(&self, features: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let y = self.forward(features.to_f64().view())?;
        let data = y.mapv(|v| v as f32);
        Ok(EmbeddingMatrix::new(features.ids().to_vec(), data)?)
    }

    /// `TOY1`, `u32` d_in, `u32` d_out, then `W` row-major and `b`, all
    /// little-endian `f32`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.d_in() as u32).to_le_bytes())?;
        w.write_all(&(self.d_out() as u32).to_le_bytes())?;
        for &v in self.w.iter().chain(self.b.iter()) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 12 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(TrainError::BadCheckpoint("missing TOY1 header".into()));
        }
        let d_in = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let d_out = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let count = d_out * d_in + d_out;
        if buf.len() != 12 + 4 * count {
            return Err(TrainError::BadCheckpoint(format!(
                "{d_out}×{d_in} head needs {} bytes, file has {}",
                12 + 4 * count,
                buf.len()
            )));
        }
        let vals: Vec<f64> = buf[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let w = Array2::from_shape_vec((d_out, d_in), vals[..d_out * d_in].to_vec()).expect("length checked");
        let b = Array1::from_vec(vals[d_out * d_in..].to_vec());
        Self::new(w, b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub params: LossParams,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate of the proxy or center bank.
    pub aux_lr: f64,
    pub epochs: usize,
    /// Steps per epoch; `None` means one pass worth of images,
    /// `ceil(train images / (m·k))`.
    pub steps_per_epoch: Option<usize>,
    pub batch: BatchSpec,
    pub d_out: usize,
    /// Noise scale of the two SupCon views.
    pub sigma_aug: f64,
    /// Repeats of the per-epoch validation AUC.
    pub val_repeats: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::MultiSim,
            params: LossParams::default(),
            lr: 0.05,
            momentum: 0.9,
            aux_lr: 0.5,
            epochs: 30,
            steps_per_epoch: None,
            batch: BatchSpec::default(),
            d_out: 512,
            sigma_aug: 0.05,
            val_repeats: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.aux_lr >= 0.0 && self.aux_lr.is_finite()) {
            return bad(format!("aux_lr must be non-negative, got {}", self.aux_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1".into());
        }
        if self.d_out < 2 {
            return bad(format!("d_out must be at least 2, got {}", self.d_out));
        }
        if !(self.sigma_aug >= 0.0) {
            return bad(format!("sigma_aug must be non-negative, got {}", self.sigma_aug));
        }
        if self.val_repeats == 0 {
            return bad("val_repeats must be at least 1".into());
        }
        self.batch.validate()?;
        self.params.validate()?;
        Ok(())
    }
}

/// Rows of a feature matrix grouped by class; class `c` is the `c`-th branch
/// in sorted order.
#[derive(Debug, Clone)]
pub struct ClassPool {
    pub branches: Vec<String>,
    pub members: Vec<Vec<usize>>,
}

impl ClassPool {
    /// Groups `images` by branch; each member is the image's row in `features`.
    pub fn new(images: &[impl AsRef<str>], oracle: &LinkOracle, features: &EmbeddingMatrix) -> Result<Self> {
        let mut groups: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
        for id in images {
            let id = id.as_ref();
            let branch = oracle.label(id).ok_or_else(|| EvalError::Unlabeled(id.to_owned()))?;
            let row = features.position(id).ok_or_else(|| TrainError::MissingFeatures(id.to_owned()))?;
            groups.entry(branch).or_default().push((id, row));
        }
        let mut branches = Vec::with_capacity(groups.len());
        let mut members = Vec::with_capacity(groups.len());
        for (branch, mut rows) in groups {
            rows.sort_unstable();
            branches.push(branch.to_owned());
            members.push(rows.into_iter().map(|(_, r)| r).collect());
        }
        Ok(Self { branches, members })
    }

    pub fn classes(&self) -> usize {
        self.branches.len()
    }

    pub fn eligible(&self, k: usize) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.members[c].len() >= k).collect()
    }

    /// `m` distinct eligible classes and `k` distinct images of each:
    /// `(feature rows, class labels)`.
    pub fn draw<R: Rng>(&self, rng: &mut R, spec: &BatchSpec) -> Result<(Vec<usize>, Vec<usize>)> {
        let eligible = self.eligible(spec.k);
        if eligible.len() < spec.m {
            return Err(TrainError::TooFewClasses {
                eligible: eligible.len(),
                needed: spec.m,
                k: spec.k,
            });
        }
        let mut rows = Vec::with_capacity(spec.size());
        let mut labels = Vec::with_capacity(spec.size());
        for ci in index::sample(rng, eligible.len(), spec.m) {
            let c = eligible[ci];
            for i in index::sample(rng, self.members[c].len(), spec.k) {
                rows.push(self.members[c][i]);
                labels.push(c);
            }
        }
        Ok((rows, labels))
    }
}

/// A sampled batch: image ids and their class index among the sorted
/// branches of the split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledBatch {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

/// Draws one `m × k` batch from `images` with a fresh generator for `seed`.
pub fn sample_batch(
    images: &[impl AsRef<str>],
    oracle: &LinkOracle,
    features: &EmbeddingMatrix,
    spec: &BatchSpec,
    seed: u64,
) -> Result<SampledBatch> {
    spec.validate()?;
    let pool = ClassPool::new(images, oracle, features)?;
    let (rows, labels) = pool.draw(&mut rng::seeded(seed), spec)?;
    Ok(SampledBatch {
        ids: rows.into_iter().map(|r| features.ids()[r].clone()).collect(),
        labels,
    })
}

/// Head, loss bank and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ToyModel,
    /// Proxies (one row per class) or centers (`J` rows per class).
    pub bank: Option<Array2<f64>>,
    pub config: TrainConfig,
    vel_w: Array2<f64>,
    vel_b: Array1<f64>,
    vel_bank: Option<Array2<f64>>,
    rng: SplitMix64,
}

impl Trainer {
    pub fn new(model: ToyModel, bank: Option<Array2<f64>>, config: TrainConfig) -> Self {
        let vel_w = Array2::zeros(model.w.dim());
        let vel_b = Array1::zeros(model.b.len());
        let vel_bank = bank.as_ref().map(|b| Array2::zeros(b.dim()));
        let rng = rng::substream(config.seed, 3);
        Self {
            model,
            bank,
            config,
            vel_w,
            vel_b,
            vel_bank,
            rng,
        }
    }

    /// Builds the bank for `config.loss` from the class means of the head's
    /// current embeddings of `x`. SoftTriple centers of one class start at
    /// the class mean plus small seeded noise so they can separate.
    pub fn init_bank(
        model: &ToyModel,
        config: &TrainConfig,
        x: ArrayView2<f64>,
        labels: &[usize],
        classes: usize,
    ) -> Result<Option<Array2<f64>>> {
        if !config.loss.uses_bank() {
            return Ok(None);
        }
        let y = model.forward(x)?;
        let mut means = Array2::<f64>::zeros((classes, y.ncols()));
        for (row, &c) in y.rows().into_iter().zip(labels) {
            let mut m = means.row_mut(c);
            m += &row;
        }
        let mut rng = rng::substream(config.seed, 4);
        let d = y.ncols();
        let bank = match config.loss {
            LossKind::SoftTriple => {
                let j = config.params.softtriple.centers_per_class;
                let mut centers = Array2::zeros((classes * j, d));
                for c in 0..classes {
                    let mean = unit_or_random(means.row(c).to_owned(), &mut rng);
                    for k in 0..j {
                        let mut row = centers.row_mut(c * j + k);
                        for (dst, &m) in row.iter_mut().zip(mean.iter()) {
                            *dst = m + 0.1 * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt();
                        }
                    }
                }
                normalize_rows(&mut centers);
                centers
            }
            _ => {
                let mut proxies = Array2::zeros((classes, d));
                for c in 0..classes {
                    proxies.row_mut(c).assign(&unit_or_random(means.row(c).to_owned(), &mut rng));
                }
                proxies
            }
        };
        Ok(Some(bank))
    }

    /// One SGD-with-momentum step on a batch of raw features; returns the loss
    /// before the update.
    pub fn step(&mut self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let cfg = &self.config;
        let (x, labels) = if cfg.loss == LossKind::SupCon {
            let mut views = Array2::zeros((2 * x.nrows(), x.ncols()));
            for (i, row) in x.rows().into_iter().enumerate() {
                for v in 0..2 {
                    let mut dst = views.row_mut(v * x.nrows() + i);
                    for (d, &s) in dst.iter_mut().zip(row.iter()) {
                        *d = s + cfg.sigma_aug * self.rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            (views, labels.iter().chain(labels).copied().collect::<Vec<_>>())
        } else {
            (x.to_owned(), labels.to_vec())
        };
        let g = self
            .model
            .loss_and_grad(x.view(), &labels, cfg.loss, &cfg.params, self.bank.as_ref().map(|b| b.view()))?;
        if !g.value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                value: g.value,
                epoch: 0,
                step: 0,
            });
        }
        let (mu, lr) = (cfg.momentum, cfg.lr);
        self.vel_w = &self.vel_w * mu + &g.w;
        self.vel_b = &self.vel_b * mu + &g.b;
        self.model.w.scaled_add(-lr, &self.vel_w);
        self.model.b.scaled_add(-lr, &self.vel_b);
        if let (Some(bank), Some(vel), Some(grad)) = (self.bank.as_mut(), self.vel_bank.as_mut(), g.aux.as_ref()) {
            *vel = &*vel * mu + grad;
            bank.scaled_add(-cfg.aux_lr, vel);
            normalize_rows(bank);
        }
        Ok(g.value)
    }
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

fn unit_or_random<R: Rng>(mut v: Array1<f64>, rng: &mut R) -> Array1<f64> {
    let mut n = v.dot(&v).sqrt();
    while n == 0.0 {
        v.mapv_inplace(|_| rng.sample(StandardNormal));
        n = v.dot(&v).sqrt();
    }
    v / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when `val_ss` cannot be scored (fewer than 2 branches).
    pub val_r_at_1: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Head from the epoch with the best validation R@1 (the last epoch if
    /// validation was never possible).
    pub model: ToyModel,
    pub bank: Option<Array2<f64>>,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
}

/// Writes `epoch,train_loss,val_r_at_1,val_auc`; unavailable metrics are empty.
pub fn write_history<W: Write>(history: &[HistoryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "val_r_at_1", "val_auc"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), opt(r.val_r_at_1), opt(r.val_auc)])?;
    }
    w.flush()?;
    Ok(())
}

/// Scores `model` on `images`: `(R@1, mean AUC)`, or `None` when the set has
/// fewer than two branches or no same-branch pairs.
pub fn validate_model(
    model: &ToyModel,
    features: &EmbeddingMatrix,
    oracle: &LinkOracle,
    images: &[impl AsRef<str> + Sync],
    repeats: usize,
    seed: u64,
) -> Result<Option<(f64, f64)>> {
    let sub = features.select(images)?;
    let emb = model.embed(&sub)?;
    let opts = EvalOptions {
        repeats,
        seed,
        hard_negatives: false,
    };
    match linkeval::evaluate(&emb, oracle, images, &opts, None) {
        Ok(r) => Ok(Some((r.r_at_1, r.auc.mean))),
        Err(EvalError::TooFewBranches(_) | EvalError::NoEligibleAnchors) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Trains a head on the `train` split and selects the epoch by R@1 on
/// `val_ss`. `features` holds one input row per image id.
pub fn train(
    catalog: &Catalog,
    splits: &SplitAssignment,
    features: &EmbeddingMatrix,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let oracle = LinkOracle::from_catalog(catalog);
    let train_ids = splits.images_in(SplitName::Train);
    let val_ids = splits.images_in(SplitName::ValSs);
    let pool = ClassPool::new(&train_ids, &oracle, features)?;
    let eligible = pool.eligible(config.batch.k).len();
    if eligible < config.batch.m {
        return Err(TrainError::TooFewClasses {
            eligible,
            needed: config.batch.m,
            k: config.batch.k,
        });
    }

    let x_all = features.to_f64();
    let model = ToyModel::init(features.dim(), config.d_out, rng::substream(config.seed, 2).random())?;
    let (rows, labels): (Vec<usize>, Vec<usize>) = pool
        .members
        .iter()
        .enumerate()
        .flat_map(|(c, m)| m.iter().map(move |&r| (r, c)))
        .unzip();
    let bank = Trainer::init_bank(&model, config, x_all.select(Axis(0), &rows).view(), &labels, pool.classes())?;
    let mut trainer = Trainer::new(model, bank, config.clone());

    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| train_ids.len().div_ceil(config.batch.size()));
    let mut sampler = rng::substream(config.seed, 5);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ToyModel, Option<Array2<f64>>)> = None;

    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let (rows, labels) = pool.draw(&mut sampler, &config.batch)?;
            let xb = x_all.select(Axis(0), &rows);
            let value = trainer.step(xb.view(), &labels).map_err(|e| match e {
                TrainError::NonFiniteLoss { value, .. } => TrainError::NonFiniteLoss { value, epoch, step },
                other => other,
            })?;
            total += value;
        }
        let val = validate_model(&trainer.model, features, &oracle, &val_ids, config.val_repeats, config.seed)?;
        history.push(HistoryRow {
            epoch,
            train_loss: total / steps as f64,
            val_r_at_1: val.map(|v| v.0),
            val_auc: val.map(|v| v.1),
        });
        if let Some((r1, _)) = val {
            if best.as_ref().is_none_or(|b| r1 >= b.0) {
                best = Some((r1, epoch, trainer.model.clone(), trainer.bank.clone()));
            }
        }
    }

    let (model, bank, best_epoch) = match best {
        Some((_, epoch, model, bank)) => (model, bank, epoch),
        None => (trainer.model, trainer.bank, config.epochs),
    };
    Ok(TrainOutcome {
        model,
        bank,
        best_epoch,
        history,
    })
}
