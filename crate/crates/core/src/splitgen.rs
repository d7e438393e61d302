//! Seen/unseen evaluation splits over a branch/chain hierarchy.
//!
//! Images are partitioned into `train`, three validation splits and four test
//! splits:
//!
//! | split      | branch seen in training | chain seen in training |
//! |------------|-------------------------|------------------------|
//! | `*_ss`     | yes                     | yes                    |
//! | `*_su`     | no                      | yes                    |
//! | `*_uu`     | no                      | no                     |
//! | `test_unk` | chain unknown           | chain unknown          |
//!
//! Test splits are carved from the whole known-chain portion, so their
//! "training side" is `trainval`; the validation splits are carved from
//! what is left by running the same recipe again, so their training side is
//! the final `train` split. There is never a `val_unk`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::par;
use crate::rng::{seeded, SplitMix64};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("invalid split config: {0}")]
    InvalidConfig(String),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("need at least 2 known chains, found {0}")]
    TooFewKnownChains(usize),
    #[error("{stage} stage: empty sampling pool ({reason})")]
    EmptyPool { stage: &'static str, reason: String },
    #[error("unknown split name `{0}`")]
    UnknownSplit(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad split file header `{0}`, expected `image_id,split`")]
    Header(String),
}

pub type Result<T, E = SplitError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    ValSs,
    ValSu,
    ValUu,
    TestSs,
    TestSu,
    TestUu,
    TestUnk,
}

impl SplitName {
    pub const ALL: [SplitName; 8] = [
        SplitName::Train,
        SplitName::ValSs,
        SplitName::ValSu,
        SplitName::ValUu,
        SplitName::TestSs,
        SplitName::TestSu,
        SplitName::TestUu,
        SplitName::TestUnk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::ValSs => "val_ss",
            SplitName::ValSu => "val_su",
            SplitName::ValUu => "val_uu",
            SplitName::TestSs => "test_ss",
            SplitName::TestSu => "test_su",
            SplitName::TestUu => "test_uu",
            SplitName::TestUnk => "test_unk",
        }
    }

    /// `train` plus the three validation splits.
    pub fn is_trainval(self) -> bool {
        matches!(
            self,
            SplitName::Train | SplitName::ValSs | SplitName::ValSu | SplitName::ValUu
        )
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = SplitError;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| SplitError::UnknownSplit(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    /// Fraction of known chains reserved for the `uu` split.
    pub uu_chain_fraction: f64,
    /// Fraction of the remaining branches reserved for the `su` split.
    pub su_branch_fraction: f64,
    /// Branches smaller than this never contribute to `ss`.
    pub t1: usize,
    /// Minimum number of images a branch places in `ss`.
    pub t2: usize,
    /// A branch of size N places at most ⌊N / ss_divisor⌋ images in `ss`.
    pub ss_divisor: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            uu_chain_fraction: 0.1,
            su_branch_fraction: 0.1,
            t1: 25,
            t2: 3,
            ss_divisor: 5,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f < 1.0;
        if !frac_ok(self.uu_chain_fraction) {
            return Err(SplitError::InvalidConfig(format!(
                "uu_chain_fraction must lie in (0, 1), got {}",
                self.uu_chain_fraction
            )));
        }
        if !frac_ok(self.su_branch_fraction) {
            return Err(SplitError::InvalidConfig(format!(
                "su_branch_fraction must lie in (0, 1), got {}",
                self.su_branch_fraction
            )));
        }
        if self.t2 == 0 || self.ss_divisor == 0 {
            return Err(SplitError::InvalidConfig("t2 and ss_divisor must be at least 1".into()));
        }
        if self.t1 < self.ss_divisor * self.t2 {
            return Err(SplitError::InvalidConfig(format!(
                "t1 ({}) must be at least ss_divisor × t2 ({} × {})",
                self.t1, self.ss_divisor, self.t2
            )));
        }
        Ok(())
    }
}

/// A row of a split file that could not be accepted into the assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub image_id: String,
    pub split: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, SplitName>,
    /// Config used to generate the assignment; absent when read from a file.
    pub config: Option<SplitConfig>,
    /// Rows from a split file with an invalid split name or a repeated id.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<RejectedRow>,
}

impl SplitAssignment {
    pub fn get(&self, image_id: &str) -> Option<SplitName> {
        self.assignment.get(image_id).copied()
    }

    pub fn images_in(&self, split: SplitName) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().quoting(false).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() != 2 || &header[0] != "image_id" || &header[1] != "split" {
            return Err(SplitError::Header(header.iter().collect::<Vec<_>>().join(",")));
        }
        let mut assignment = BTreeMap::new();
        let mut rejected = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let (id, name) = (row[0].to_owned(), row[1].to_owned());
            match name.parse::<SplitName>() {
                Ok(split) => {
                    if assignment.contains_key(&id) {
                        rejected.push(RejectedRow {
                            image_id: id,
                            split: name,
                            reason: "image listed more than once".into(),
                        });
                    } else {
                        assignment.insert(id, split);
                    }
                }
                Err(_) => rejected.push(RejectedRow {
                    image_id: id,
                    split: name,
                    reason: "not one of the eight split names".into(),
                }),
            }
        }
        Ok(Self {
            assignment,
            config: None,
            rejected,
        })
    }

    /// Writes `image_id,split` rows sorted by image id.
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .quote_style(csv::QuoteStyle::Never)
            .from_writer(writer);
        wtr.write_record(["image_id", "split"])?;
        for (id, split) in &self.assignment {
            wtr.write_record([id.as_str(), split.as_str()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.to_writer(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ids are UTF-8")
    }
}

pub fn load_splits(path: impl AsRef<Path>) -> Result<SplitAssignment> {
    let file = std::fs::File::open(path)?;
    SplitAssignment::from_reader(std::io::BufReader::new(file))
}

pub fn save_splits(assignment: &SplitAssignment, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    assignment.to_writer(std::io::BufWriter::new(file))
}

/// Which split names one pass of the recipe fills.
struct Level {
    uu: SplitName,
    su: SplitName,
    ss: SplitName,
    /// Infeasible stages are errors at the test level, skipped at the validation level.
    strict: bool,
}

/// Known-chain branches still unassigned: branch → (chain, sorted image ids).
type Portion<'a> = BTreeMap<&'a str, (&'a str, Vec<&'a str>)>;

fn ceil_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).ceil() as usize
}

fn carve<'a>(
    mut portion: Portion<'a>,
    cfg: &SplitConfig,
    level: &Level,
    rng: &mut SplitMix64,
    out: &mut BTreeMap<String, SplitName>,
) -> Result<Portion<'a>> {
    // chain → branches, both sorted
    let mut chains: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (&b, (c, _)) in &portion {
        chains.entry(c).or_default().push(b);
    }
    let chain_ids: Vec<&str> = chains.keys().copied().collect();

    // uu: whole chains
    if chain_ids.len() < 2 {
        if level.strict {
            return Err(SplitError::TooFewKnownChains(chain_ids.len()));
        }
    } else {
        let n = chain_ids.len();
        let take = ceil_count(cfg.uu_chain_fraction, n).clamp(1, n - 1);
        for i in index::sample(rng, n, take) {
            let chain = chain_ids[i];
            for b in chains.remove(chain).expect("sampled chain exists") {
                let (_, images) = portion.remove(b).expect("branch in portion");
                for id in images {
                    out.insert(id.to_owned(), level.uu);
                }
            }
        }
    }

    // su: whole branches, never the last branch of a chain
    let rest: Vec<&str> = portion.keys().copied().collect();
    let capacity: usize = chains.values().map(|bs| bs.len() - 1).sum();
    if capacity == 0 {
        if level.strict {
            return Err(SplitError::EmptyPool {
                stage: "su",
                reason: "every remaining chain has a single branch".into(),
            });
        }
    } else {
        let take = ceil_count(cfg.su_branch_fraction, rest.len()).min(capacity);
        let mut remaining: HashMap<&str, usize> =
            chains.iter().map(|(c, bs)| (*c, bs.len())).collect();
        let mut order = rest.clone();
        order.shuffle(rng);
        let mut taken = 0;
        for b in order {
            if taken == take {
                break;
            }
            let chain = portion[b].0;
            let left = remaining.get_mut(chain).expect("chain of remaining branch");
            if *left > 1 {
                *left -= 1;
                taken += 1;
                let (_, images) = portion.remove(b).expect("branch in portion");
                for id in images {
                    out.insert(id.to_owned(), level.su);
                }
            }
        }
    }

    // ss: k_i images from each branch with at least t1 images
    let mut eligible = 0;
    for (_, images) in portion.values_mut() {
        let n = images.len();
        if n < cfg.t1 {
            continue;
        }
        eligible += 1;
        let k = rng.random_range(cfg.t2..=n / cfg.ss_divisor);
        let mut picked = index::sample(rng, n, k).into_vec();
        picked.sort_unstable();
        for &i in picked.iter().rev() {
            let id = images.remove(i);
            out.insert(id.to_owned(), level.ss);
        }
    }
    if eligible == 0 && level.strict {
        return Err(SplitError::EmptyPool {
            stage: "ss",
            reason: format!("no remaining branch has at least t1 = {} images", cfg.t1),
        });
    }

    Ok(portion)
}

/// Generates the full split assignment; deterministic in `(catalog, config)`.
pub fn generate_splits(catalog: &Catalog, config: &SplitConfig) -> Result<SplitAssignment> {
    config.validate()?;
    if catalog.is_empty() {
        return Err(SplitError::EmptyCatalog);
    }
    let known = catalog.chain_index().len();
    if known < 2 {
        return Err(SplitError::TooFewKnownChains(known));
    }

    let mut out = BTreeMap::new();
    let mut portion: Portion = BTreeMap::new();
    for (branch, images) in catalog.branch_index() {
        let mut ids: Vec<&str> = images.iter().map(String::as_str).collect();
        ids.sort_unstable();
        match catalog.chain_of_branch(branch) {
            None => {
                for id in ids {
                    out.insert(id.to_owned(), SplitName::TestUnk);
                }
            }
            Some(chain) => {
                portion.insert(branch.as_str(), (chain, ids));
            }
        }
    }

    let mut rng = seeded(config.seed);
    let test = Level {
        uu: SplitName::TestUu,
        su: SplitName::TestSu,
        ss: SplitName::TestSs,
        strict: true,
    };
    let val = Level {
        uu: SplitName::ValUu,
        su: SplitName::ValSu,
        ss: SplitName::ValSs,
        strict: false,
    };
    let portion = carve(portion, config, &test, &mut rng, &mut out)?;
    let portion = carve(portion, config, &val, &mut rng, &mut out)?;
    for (_, (_, images)) in portion {
        for id in images {
            out.insert(id.to_owned(), SplitName::Train);
        }
    }

    Ok(SplitAssignment {
        assignment: out,
        config: Some(*config),
        rejected: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub name: String,
    pub passed: bool,
    /// Image, branch or chain ids responsible for a failure.
    pub offending: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub images: usize,
    pub branches: usize,
    /// Known chains only.
    pub chains: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCountRow {
    pub split: String,
    #[serde(flatten)]
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub checks: Vec<ConstraintCheck>,
    pub counts: Vec<SplitCountRow>,
}

impl ConstraintReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ConstraintCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConstraintCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn counts_for(&self, split: &str) -> Option<SplitCounts> {
        self.counts.iter().find(|r| r.split == split).map(|r| r.counts)
    }
}

/// Per-split image ids, branch sets and known-chain sets, in the shape the
/// checks need.
struct SplitView<'a> {
    branches: BTreeMap<SplitName, BTreeMap<&'a str, usize>>,
    chains: BTreeMap<SplitName, BTreeSet<&'a str>>,
    images: BTreeMap<SplitName, Vec<&'a str>>,
}

impl<'a> SplitView<'a> {
    fn new(catalog: &'a Catalog, assignment: &'a SplitAssignment) -> Self {
        let mut view = SplitView {
            branches: SplitName::ALL.iter().map(|&s| (s, BTreeMap::new())).collect(),
            chains: SplitName::ALL.iter().map(|&s| (s, BTreeSet::new())).collect(),
            images: SplitName::ALL.iter().map(|&s| (s, Vec::new())).collect(),
        };
        for (id, &split) in &assignment.assignment {
            let Some(rec) = catalog.get(id) else { continue };
            *view.branches.get_mut(&split).unwrap().entry(rec.branch_id.as_str()).or_insert(0) += 1;
            if let Some(c) = rec.chain_id.as_deref() {
                view.chains.get_mut(&split).unwrap().insert(c);
            }
            view.images.get_mut(&split).unwrap().push(id.as_str());
        }
        view
    }

    fn branch_counts(&self, splits: &[SplitName]) -> BTreeMap<&'a str, usize> {
        let mut out = BTreeMap::new();
        for s in splits {
            for (&b, &n) in &self.branches[s] {
                *out.entry(b).or_insert(0) += n;
            }
        }
        out
    }

    fn chain_set(&self, splits: &[SplitName]) -> BTreeSet<&'a str> {
        splits.iter().flat_map(|s| self.chains[s].iter().copied()).collect()
    }
}

const TRAINVAL: [SplitName; 4] = [SplitName::Train, SplitName::ValSs, SplitName::ValSu, SplitName::ValUu];

fn check(name: &str, offending: Vec<String>) -> ConstraintCheck {
    ConstraintCheck {
        name: name.to_owned(),
        passed: offending.is_empty(),
        offending,
    }
}

fn owned<'a>(it: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    it.into_iter().map(str::to_owned).collect()
}

fn ss_check(
    name: &str,
    view: &SplitView,
    ss: SplitName,
    seen: &[SplitName],
    config: Option<&SplitConfig>,
) -> ConstraintCheck {
    let seen_counts = view.branch_counts(seen);
    let mut bad = Vec::new();
    for (&b, &k) in &view.branches[&ss] {
        let in_train = seen_counts.get(b).copied().unwrap_or(0);
        let mut ok = in_train >= 1;
        if let Some(cfg) = config {
            let n = k + in_train;
            ok &= k >= cfg.t2 && k <= n / cfg.ss_divisor;
        }
        if !ok {
            bad.push(b.to_owned());
        }
    }
    check(name, bad)
}

fn su_check(name: &str, view: &SplitView, su: SplitName, seen: &[SplitName]) -> ConstraintCheck {
    let seen_branches = view.branch_counts(seen);
    let seen_chains = view.chain_set(seen);
    let mut bad: BTreeSet<&str> = view.branches[&su]
        .keys()
        .copied()
        .filter(|b| seen_branches.contains_key(b))
        .collect();
    bad.extend(view.chains[&su].iter().copied().filter(|c| !seen_chains.contains(c)));
    check(name, owned(bad))
}

fn uu_check(name: &str, view: &SplitView, uu: SplitName, seen: &[SplitName]) -> ConstraintCheck {
    let seen_chains = view.chain_set(seen);
    let bad = view.chains[&uu].intersection(&seen_chains).copied();
    check(name, owned(bad))
}

/// Checks every split constraint independently; failures become report entries.
pub fn verify_splits(catalog: &Catalog, assignment: &SplitAssignment) -> ConstraintReport {
    let view = SplitView::new(catalog, assignment);
    let config = assignment.config.as_ref();
    let train = [SplitName::Train];
    let known: BTreeSet<&str> = catalog.known_chains().collect();

    let checks: Vec<Box<dyn Fn() -> ConstraintCheck + Sync + '_>> = vec![
        Box::new(|| {
            let mut bad: BTreeSet<&str> = BTreeSet::new();
            bad.extend(catalog.records().iter().map(|r| r.image_id.as_str()).filter(|id| !assignment.assignment.contains_key(*id)));
            bad.extend(assignment.assignment.keys().map(String::as_str).filter(|id| !catalog.contains(id)));
            bad.extend(assignment.rejected.iter().map(|r| r.image_id.as_str()));
            check("partition", owned(bad))
        }),
        Box::new(|| ss_check("test_ss_seen", &view, SplitName::TestSs, &TRAINVAL, config)),
        Box::new(|| su_check("test_su_unseen_branch", &view, SplitName::TestSu, &TRAINVAL)),
        Box::new(|| uu_check("test_uu_unseen_chain", &view, SplitName::TestUu, &TRAINVAL)),
        Box::new(|| {
            let unk = &view.images[&SplitName::TestUnk];
            let mut bad: BTreeSet<&str> = unk
                .iter()
                .copied()
                .filter(|id| catalog.chain_of(id).is_some())
                .collect();
            for rec in catalog.records() {
                if rec.chain_id.is_none() && assignment.get(&rec.image_id) != Some(SplitName::TestUnk) {
                    bad.insert(rec.image_id.as_str());
                }
            }
            check("test_unk_exact", owned(bad))
        }),
        Box::new(|| ss_check("val_ss_seen", &view, SplitName::ValSs, &train, config)),
        Box::new(|| su_check("val_su_unseen_branch", &view, SplitName::ValSu, &train)),
        Box::new(|| uu_check("val_uu_unseen_chain", &view, SplitName::ValUu, &train)),
        Box::new(|| {
            let rest: BTreeSet<&str> = known.difference(&view.chains[&SplitName::TestUu]).copied().collect();
            let trainval = view.chain_set(&TRAINVAL);
            let rest_val: BTreeSet<&str> = rest.difference(&view.chains[&SplitName::ValUu]).copied().collect();
            let train_chains = view.chain_set(&train);
            let mut bad: BTreeSet<&str> = rest.symmetric_difference(&trainval).copied().collect();
            bad.extend(rest_val.symmetric_difference(&train_chains).copied());
            check("train_chains_rest", owned(bad))
        }),
    ];
    let checks = par::map_slice(&checks, |f| f());

    ConstraintReport {
        checks,
        counts: count_rows(catalog, &view),
    }
}

fn count_rows(catalog: &Catalog, view: &SplitView) -> Vec<SplitCountRow> {
    let row = |label: &str, splits: &[SplitName]| {
        let branches = view.branch_counts(splits);
        SplitCountRow {
            split: label.to_owned(),
            counts: SplitCounts {
                images: branches.values().sum(),
                branches: branches.len(),
                chains: view.chain_set(splits).len(),
            },
        }
    };
    let mut rows = vec![
        row("train", &[SplitName::Train]),
        row("trainval", &TRAINVAL),
        row("val_ss", &[SplitName::ValSs]),
        row("test_ss", &[SplitName::TestSs]),
        row("val_su", &[SplitName::ValSu]),
        row("test_su", &[SplitName::TestSu]),
        row("val_uu", &[SplitName::ValUu]),
        row("test_uu", &[SplitName::TestUu]),
        row("test_unk", &[SplitName::TestUnk]),
        row("total", &SplitName::ALL),
    ];
    // total chains are the catalog's known chains even if some image is unassigned
    if let Some(total) = rows.last_mut() {
        total.counts.chains = total.counts.chains.max(catalog.chain_index().len());
    }
    rows
}

/// The per-split images / branches / chains table.
pub fn split_report(catalog: &Catalog, assignment: &SplitAssignment) -> Vec<SplitCountRow> {
    count_rows(catalog, &SplitView::new(catalog, assignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ImageRecord;

    /// chains {c1: (b1, b2), c2: (b3)}, unknown: (u1)
    fn tiny() -> Catalog {
        let mut recs = Vec::new();
        for (b, c, n) in [("b1", Some("c1"), 12), ("b2", Some("c1"), 12), ("b3", Some("c2"), 6), ("u1", None, 4)] {
            for i in 0..n {
                recs.push(ImageRecord::new(format!("{b}_{i:02}"), b, c));
            }
        }
        Catalog::from_records(recs).unwrap()
    }

    fn tiny_config(seed: u64) -> SplitConfig {
        SplitConfig {
            seed,
            uu_chain_fraction: 0.3,
            su_branch_fraction: 0.3,
            t1: 10,
            t2: 2,
            ss_divisor: 5,
        }
    }

    #[test]
    fn split_names_round_trip() {
        for s in SplitName::ALL {
            assert_eq!(s.as_str().parse::<SplitName>().unwrap(), s);
        }
        assert!("val_unk".parse::<SplitName>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SplitConfig::default().validate().is_ok());
        let bad = SplitConfig { t1: 14, t2: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SplitConfig { uu_chain_fraction: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SplitConfig { su_branch_fraction: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    /// First seed whose uu draw picks c2. Picking c1 instead leaves c2 with a
    /// single branch and no su pool, which is an error.
    fn tiny_seed() -> u64 {
        (0..64)
            .find(|&s| {
                generate_splits(&tiny(), &tiny_config(s))
                    .is_ok_and(|a| a.get("b3_00") == Some(SplitName::TestUu))
            })
            .expect("some seed reserves c2")
    }

    #[test]
    fn tiny_catalog_uu_and_unknown() {
        let cat = tiny();
        let seed = tiny_seed();
        let a = generate_splits(&cat, &tiny_config(seed)).unwrap();
        for i in 0..6 {
            assert_eq!(a.get(&format!("b3_{i:02}")), Some(SplitName::TestUu), "seed {seed}");
        }
        for i in 0..4 {
            assert_eq!(a.get(&format!("u1_{i:02}")), Some(SplitName::TestUnk));
        }
        // c1 keeps one branch in training, the other is su
        let su: BTreeSet<&str> = a.images_in(SplitName::TestSu).iter().map(|id| &id[..2]).collect();
        assert_eq!(su.len(), 1);
        let report = verify_splits(&cat, &a);
        assert!(report.all_passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn tiny_catalog_other_draw_errors() {
        let cat = tiny();
        let failing = (0..64).find(|&s| generate_splits(&cat, &tiny_config(s)).is_err()).unwrap();
        let err = generate_splits(&cat, &tiny_config(failing)).unwrap_err();
        assert!(matches!(err, SplitError::EmptyPool { stage: "su", .. }), "{err}");
    }

    #[test]
    fn deterministic() {
        let cat = tiny();
        let a = generate_splits(&cat, &tiny_config(tiny_seed())).unwrap();
        let b = generate_splits(&cat, &tiny_config(tiny_seed())).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
    }

    #[test]
    fn record_order_does_not_matter() {
        let cat = tiny();
        let mut recs = cat.records().to_vec();
        recs.reverse();
        let rev = Catalog::from_records(recs).unwrap();
        let a = generate_splits(&cat, &tiny_config(tiny_seed())).unwrap();
        let b = generate_splits(&rev, &tiny_config(tiny_seed())).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn one_known_chain_is_an_error() {
        let cat = Catalog::from_records(vec![
            ImageRecord::new("a", "b1", Some("c1")),
            ImageRecord::new("b", "b2", None),
        ])
        .unwrap();
        assert!(matches!(
            generate_splits(&cat, &tiny_config(0)),
            Err(SplitError::TooFewKnownChains(1))
        ));
        assert!(matches!(generate_splits(&Catalog::empty(), &tiny_config(0)), Err(SplitError::EmptyCatalog)));
    }

    #[test]
    fn single_branch_chains_have_no_su_pool() {
        let recs = (0..3)
            .flat_map(|c| (0..10).map(move |i| ImageRecord::new(format!("c{c}_{i}"), format!("b{c}"), Some(&*format!("c{c}")))))
            .collect();
        let cat = Catalog::from_records(recs).unwrap();
        let err = generate_splits(&cat, &tiny_config(0)).unwrap_err();
        assert!(matches!(err, SplitError::EmptyPool { stage: "su", .. }), "{err}");
    }

    #[test]
    fn planted_uu_leak_names_chain() {
        let cat = tiny();
        let mut a = generate_splits(&cat, &tiny_config(tiny_seed())).unwrap();
        let victim = a.images_in(SplitName::TestUu)[0].to_owned();
        let chain = cat.chain_of(&victim).unwrap().to_owned();
        a.assignment.insert(victim, SplitName::Train);
        let report = verify_splits(&cat, &a);
        let c = report.check("test_uu_unseen_chain").unwrap();
        assert!(!c.passed);
        assert_eq!(c.offending, vec![chain]);
    }

    #[test]
    fn val_unk_row_fails_partition() {
        let cat = tiny();
        let a = generate_splits(&cat, &tiny_config(tiny_seed())).unwrap();
        let mut csv = a.to_csv_string();
        csv = csv.replacen("u1_00,test_unk", "u1_00,val_unk", 1);
        let read = SplitAssignment::from_reader(csv.as_bytes()).unwrap();
        assert_eq!(read.rejected.len(), 1);
        let report = verify_splits(&cat, &read);
        let c = report.check("partition").unwrap();
        assert!(!c.passed);
        assert_eq!(c.offending, vec!["u1_00".to_string()]);
        assert!(!report.check("test_unk_exact").unwrap().passed);
    }

    #[test]
    fn split_file_round_trip() {
        let cat = tiny();
        let a = generate_splits(&cat, &tiny_config(tiny_seed())).unwrap();
        let b = SplitAssignment::from_reader(a.to_csv_string().as_bytes()).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert!(b.rejected.is_empty());
    }

    #[test]
    fn report_counts_match_recount() {
        let cat = tiny();
        let a = generate_splits(&cat, &tiny_config(tiny_seed())).unwrap();
        let rows = split_report(&cat, &a);
        for s in SplitName::ALL {
            let ids = a.images_in(s);
            let branches: BTreeSet<&str> = ids.iter().map(|id| cat.branch_of(id).unwrap()).collect();
            let chains: BTreeSet<&str> = ids.iter().filter_map(|id| cat.chain_of(id)).collect();
            let got = rows.iter().find(|r| r.split == s.as_str()).unwrap().counts;
            assert_eq!(got, SplitCounts { images: ids.len(), branches: branches.len(), chains: chains.len() });
        }
        let total = rows.iter().find(|r| r.split == "total").unwrap().counts;
        assert_eq!(total, SplitCounts { images: 34, branches: 4, chains: 2 });
        // no val_uu is possible with a single remaining chain
        assert_eq!(rows.iter().find(|r| r.split == "val_uu").unwrap().counts, SplitCounts::default());
    }
}
