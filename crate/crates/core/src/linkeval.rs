//! Image-linking evaluation: R@1, AUROC on sampled pairs, and AUROC with
//! mined hard negatives.
//!
//! Two images are linked when they belong to the same branch. For each anchor
//! in a branch with at least two images, a repeat draws one linked partner and
//! one unlinked partner; AUC is the AUROC of the cosine scores of those pairs.
//! AUC_H keeps the positive draw and takes the negative from the anchor's hard
//! pool instead, the `K` most similar other-branch images under a reference
//! embedding.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::embedstore::{cosine, cosine_knn, EmbedError, EmbeddingMatrix};
use crate::{par, rng};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUROC needs at least one {0} score")]
    EmptyScores(&'static str),
    #[error("non-finite score {0}")]
    NonFiniteScore(f64),
    #[error("evaluation needs at least 2 branches, found {0}")]
    TooFewBranches(usize),
    #[error("image `{0}` has no label")]
    Unlabeled(String),
    #[error("image `{0}` has no reference embedding")]
    MissingReference(String),
    #[error("no anchor has a same-branch partner")]
    NoEligibleAnchors,
    #[error("hard-negative AUC requested without a hard pool")]
    MissingHardPool,
    #[error("hard pool has no negatives for anchor `{0}`")]
    EmptyPool(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// AUROC of `pos` against `neg`: the fraction of (positive, negative) pairs
/// ranked correctly, ties counting one half.
///
/// Runs in `O((P + N) log(P + N))` by sorting the pooled scores and counting
/// wins per tie group.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(EvalError::EmptyScores("positive"));
    }
    if neg.is_empty() {
        return Err(EvalError::EmptyScores("negative"));
    }
    if let Some(&bad) = pos.iter().chain(neg).find(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteScore(bad));
    }
    let mut pooled: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    // doubled counts keep the tie half-credit integral
    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        // -0.0 and 0.0 compare equal as scores
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            if pooled[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    let total = 2 * pos.len() as u128 * neg.len() as u128;
    Ok(twice_wins as f64 / total as f64)
}

/// Ground-truth links: image id → branch id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkOracle {
    labels: BTreeMap<String, String>,
}

impl LinkOracle {
    pub fn new<I, A, B>(labels: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self {
            labels: labels.into_iter().map(|(a, b)| (a.into(), b.into())).collect(),
        }
    }

    /// Branch labels for every image in the catalog.
    pub fn from_catalog(catalog: &Catalog) -> Self {
        Self::new(catalog.records().iter().map(|r| (r.image_id.clone(), r.branch_id.clone())))
    }

    /// Branch labels for `images` only.
    pub fn for_images(catalog: &Catalog, images: &[impl AsRef<str>]) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for id in images {
            let id = id.as_ref();
            let branch = catalog.branch_of(id).ok_or_else(|| EvalError::Unlabeled(id.to_owned()))?;
            labels.insert(id.to_owned(), branch.to_owned());
        }
        Ok(Self { labels })
    }

    pub fn label(&self, image: &str) -> Option<&str> {
        self.labels.get(image).map(String::as_str)
    }

    pub fn linked(&self, a: &str, b: &str) -> bool {
        a != b && matches!((self.label(a), self.label(b)), (Some(x), Some(y)) if x == y)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image ids in sorted order.
    pub fn images(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    /// Sorted image ids per branch.
    pub fn groups(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (image, branch) in &self.labels {
            groups.entry(branch.as_str()).or_default().push(image.as_str());
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Random,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkPair {
    pub anchor: String,
    pub partner: String,
    /// 1 when anchor and partner share a branch.
    pub link: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<LinkPair>,
    pub seed: u64,
    pub mode: PairMode,
    /// Anchors left out because their branch has a single image.
    pub skipped: usize,
}

impl PairSet {
    pub fn positives(&self) -> impl Iterator<Item = &LinkPair> {
        self.pairs.iter().filter(|p| p.link == 1)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &LinkPair> {
        self.pairs.iter().filter(|p| p.link == 0)
    }
}

/// `images` grouped into contiguous branch blocks, each block sorted by id.
struct Layout<'a> {
    order: Vec<&'a str>,
    /// (start, len) of each block
    blocks: Vec<(usize, usize)>,
}

impl<'a> Layout<'a> {
    fn new(images: &'a [impl AsRef<str>], oracle: &LinkOracle) -> Result<Self> {
        let mut by_branch: BTreeMap<&str, Vec<&'a str>> = BTreeMap::new();
        for id in images {
            let id = id.as_ref();
            let branch = oracle.label(id).ok_or_else(|| EvalError::Unlabeled(id.to_owned()))?;
            by_branch.entry(branch).or_default().push(id);
        }
        if by_branch.len() < 2 {
            return Err(EvalError::TooFewBranches(by_branch.len()));
        }
        let mut order = Vec::with_capacity(images.len());
        let mut blocks = Vec::with_capacity(by_branch.len());
        for (_, mut ids) in by_branch {
            ids.sort_unstable();
            ids.dedup();
            blocks.push((order.len(), ids.len()));
            order.extend(ids);
        }
        Ok(Self { order, blocks })
    }
}

fn sample_pairs<R: Rng>(
    layout: &Layout<'_>,
    rng: &mut R,
    mut negative: impl FnMut(&mut R, &str, (usize, usize)) -> Result<String>,
) -> Result<(Vec<LinkPair>, usize)> {
    let total = layout.order.len();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for &(start, len) in &layout.blocks {
        if len < 2 {
            skipped += len;
            continue;
        }
        for a in start..start + len {
            let anchor = layout.order[a];
            // uniform over the block minus the anchor
            let mut p = start + rng.random_range(0..len - 1);
            if p >= a {
                p += 1;
            }
            pairs.push(LinkPair {
                anchor: anchor.to_owned(),
                partner: layout.order[p].to_owned(),
                link: 1,
            });
            debug_assert!(total > len);
            let partner = negative(rng, anchor, (start, len))?;
            pairs.push(LinkPair {
                anchor: anchor.to_owned(),
                partner,
                link: 0,
            });
        }
    }
    Ok((pairs, skipped))
}

fn uniform_negative<R: Rng>(layout: &Layout<'_>, rng: &mut R, (start, len): (usize, usize)) -> String {
    let mut n = rng.random_range(0..layout.order.len() - len);
    if n >= start {
        n += len;
    }
    layout.order[n].to_owned()
}

/// One random same-branch partner and one random other-branch partner per
/// eligible anchor of `images`.
pub fn sample_eval_pairs(images: &[impl AsRef<str>], oracle: &LinkOracle, seed: u64) -> Result<PairSet> {
    let layout = Layout::new(images, oracle)?;
    let mut rng = rng::seeded(seed);
    let (pairs, skipped) = sample_pairs(&layout, &mut rng, |rng, _, block| Ok(uniform_negative(&layout, rng, block)))?;
    Ok(PairSet {
        pairs,
        seed,
        mode: PairMode::Random,
        skipped,
    })
}

/// Like [`sample_eval_pairs`], but each negative is drawn uniformly from the
/// anchor's hard pool.
pub fn sample_hard_pairs(
    images: &[impl AsRef<str>],
    oracle: &LinkOracle,
    pool: &HardNegPool,
    seed: u64,
) -> Result<PairSet> {
    let layout = Layout::new(images, oracle)?;
    let mut rng = rng::seeded(seed);
    let (pairs, skipped) = sample_pairs(&layout, &mut rng, |rng, anchor, _| {
        let candidates = pool.get(anchor).filter(|c| !c.is_empty()).ok_or_else(|| EvalError::EmptyPool(anchor.to_owned()))?;
        Ok(candidates[rng.random_range(0..candidates.len())].clone())
    })?;
    Ok(PairSet {
        pairs,
        seed,
        mode: PairMode::Hard,
        skipped,
    })
}

/// Per image, the `k` most similar images of other branches under a
/// reference embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardNegPool {
    pub k: usize,
    pub pools: BTreeMap<String, Vec<String>>,
}

impl HardNegPool {
    pub fn get(&self, image: &str) -> Option<&[String]> {
        self.pools.get(image).map(Vec::as_slice)
    }
}

/// Mines a [`HardNegPool`] over `images`: for each image, the top `k`
/// different-branch images of the same set by reference cosine similarity,
/// ties broken by id.
pub fn mine_hard_negatives(
    reference: &EmbeddingMatrix,
    oracle: &LinkOracle,
    images: &[impl AsRef<str>],
    k: usize,
) -> Result<HardNegPool> {
    let mut ids: Vec<&str> = images.iter().map(AsRef::as_ref).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rows = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for &id in &ids {
        rows.push(reference.position(id).ok_or_else(|| EvalError::MissingReference(id.to_owned()))?);
        labels.push(oracle.label(id).ok_or_else(|| EvalError::Unlabeled(id.to_owned()))?);
    }

    let pools = par::map_range(ids.len(), |a| {
        let anchor = reference.row(rows[a]);
        let mut scored: Vec<(f64, usize)> = (0..ids.len())
            .filter(|&b| labels[b] != labels[a])
            .map(|b| (cosine(anchor, reference.row(rows[b])), b))
            .collect();
        // ids are sorted, so index order is id order
        let order = |x: &(f64, usize), y: &(f64, usize)| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        scored.into_iter().map(|(_, b)| ids[b].to_owned()).collect::<Vec<_>>()
    });
    Ok(HardNegPool {
        k,
        pools: ids.iter().map(|s| s.to_string()).zip(pools).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub repeats: usize,
    pub seed: u64,
    /// Also report AUC_H; needs a hard pool.
    pub hard_negatives: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            repeats: 10,
            seed: 0,
            hard_negatives: false,
        }
    }
}

/// Mean and population standard deviation over repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            repeats: values.len(),
        }
    }
}

impl fmt::Display for Summary {
    /// Percentages, e.g. `95.05 ± 0.03`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r_at_1: f64,
    pub auc: Summary,
    pub auc_h: Option<Summary>,
    pub skipped: usize,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R@1 {:.2}  AUC {}", 100.0 * self.r_at_1, self.auc)?;
        if let Some(h) = &self.auc_h {
            write!(f, "  AUC_H {h}")?;
        }
        Ok(())
    }
}

/// Fraction of eligible anchors whose nearest other image shares their branch.
pub fn recall_at_1(embeddings: &EmbeddingMatrix, oracle: &LinkOracle, images: &[impl AsRef<str>]) -> Result<f64> {
    let layout = Layout::new(images, oracle)?;
    let sub = embeddings.select(&layout.order)?;
    let nn = cosine_knn(&sub, &sub, 1, true)?;
    let mut hits = 0usize;
    let mut anchors = 0usize;
    for &(start, len) in &layout.blocks {
        if len < 2 {
            continue;
        }
        for a in start..start + len {
            anchors += 1;
            let b = nn.neighbors[a][0].index;
            if (start..start + len).contains(&b) {
                hits += 1;
            }
        }
    }
    if anchors == 0 {
        return Err(EvalError::NoEligibleAnchors);
    }
    Ok(hits as f64 / anchors as f64)
}

fn pair_auc(embeddings: &EmbeddingMatrix, set: &PairSet) -> Result<f64> {
    let score = |p: &LinkPair| -> Result<f64> {
        let a = embeddings.position(&p.anchor).ok_or_else(|| EmbedError::UnknownId(p.anchor.clone()))?;
        let b = embeddings.position(&p.partner).ok_or_else(|| EmbedError::UnknownId(p.partner.clone()))?;
        Ok(embeddings.cosine(a, b))
    };
    let pos = set.positives().map(score).collect::<Result<Vec<_>>>()?;
    let neg = set.negatives().map(score).collect::<Result<Vec<_>>>()?;
    if pos.is_empty() {
        return Err(EvalError::NoEligibleAnchors);
    }
    auroc(&pos, &neg)
}

/// R@1, AUC and (optionally) AUC_H of `embeddings` on `images`.
///
/// Repeat `r` samples its pairs with seed `options.seed + r`.
pub fn evaluate(
    embeddings: &EmbeddingMatrix,
    oracle: &LinkOracle,
    images: &[impl AsRef<str> + Sync],
    options: &EvalOptions,
    hard_pool: Option<&HardNegPool>,
) -> Result<MetricReport> {
    if options.repeats == 0 {
        return Err(EvalError::InvalidOption("repeats must be at least 1".into()));
    }
    let pool = match (options.hard_negatives, hard_pool) {
        (true, None) => return Err(EvalError::MissingHardPool),
        (true, Some(p)) => Some(p),
        (false, _) => None,
    };
    let r_at_1 = recall_at_1(embeddings, oracle, images)?;

    let seeds: Vec<u64> = (0..options.repeats as u64).map(|r| options.seed.wrapping_add(r)).collect();
    let random = par::map_slice(&seeds, |&seed| -> Result<(f64, usize)> {
        let set = sample_eval_pairs(images, oracle, seed)?;
        Ok((pair_auc(embeddings, &set)?, set.skipped))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let skipped = random[0].1;
    let aucs: Vec<f64> = random.iter().map(|r| r.0).collect();

    let auc_h = match pool {
        Some(pool) => {
            let hard = par::map_slice(&seeds, |&seed| {
                let set = sample_hard_pairs(images, oracle, pool, seed)?;
                pair_auc(embeddings, &set)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            Some(Summary::of(&hard))
        }
        None => None,
    };

    Ok(MetricReport {
        r_at_1,
        auc: Summary::of(&aucs),
        auc_h,
        skipped,
    })
}
