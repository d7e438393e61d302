//! Image catalogs: records carrying a branch (class) label and an optional
//! chain (super-class) label, with inverted indices over both.
//!
//! A [`Catalog`] is immutable once built and validated. Images whose branch has
//! no chain are "unknown-chain"; the absence is kept as `None` and never
//! encoded as a sentinel chain id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CSV_HEADER: [&str; 4] = ["image_id", "branch_id", "chain_id", "content_key"];

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: expected `image_id,branch_id[,chain_id[,content_key]]`, found `{0}`")]
    Header(String),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("duplicate image_id `{0}`")]
    DuplicateImage(String),
    #[error("branch `{branch}` has conflicting chain ids: {first} vs {second}")]
    ChainConflict {
        branch: String,
        first: String,
        second: String,
    },
    #[error("invalid {field} `{value}`: ids must be non-empty and contain no comma, quote or newline")]
    InvalidToken { field: &'static str, value: String },
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

/// One image of the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub branch_id: String,
    /// `None` means the chain is unknown.
    pub chain_id: Option<String>,
    /// Caller-supplied content hash used for duplicate detection.
    pub content_key: Option<String>,
    /// Row of an associated [`crate::EmbeddingMatrix`], if any. Not part of the CSV format.
    #[serde(skip)]
    pub feature_ref: Option<usize>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, branch_id: impl Into<String>, chain_id: Option<&str>) -> Self {
        Self {
            image_id: image_id.into(),
            branch_id: branch_id.into(),
            chain_id: chain_id.map(str::to_owned),
            content_key: None,
            feature_ref: None,
        }
    }

    pub fn with_content_key(mut self, key: impl Into<String>) -> Self {
        self.content_key = Some(key.into());
        self
    }
}

/// Validated set of image records plus exact inverted indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    records: Vec<ImageRecord>,
    /// branch_id → image ids, in record order.
    branch_index: BTreeMap<String, Vec<String>>,
    /// known chain_id → branch ids.
    chain_index: BTreeMap<String, BTreeSet<String>>,
    /// branch → chain (`None` = unknown).
    branch_chain: BTreeMap<String, Option<String>>,
    unknown_branches: BTreeSet<String>,
    position: HashMap<String, usize>,
}

fn check_token(field: &'static str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains([',', '"', '\n', '\r']) {
        return Err(CatalogError::InvalidToken {
            field,
            value: value.to_owned(),
        });
    }
    Ok(())
}

impl Catalog {
    /// Builds a catalog, enforcing unique image ids and one chain per branch.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self> {
        let mut branch_index: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut branch_chain: BTreeMap<String, Option<String>> = BTreeMap::new();
        let mut position = HashMap::with_capacity(records.len());

        for (i, rec) in records.iter().enumerate() {
            check_token("image_id", &rec.image_id)?;
            check_token("branch_id", &rec.branch_id)?;
            if let Some(c) = &rec.chain_id {
                check_token("chain_id", c)?;
            }
            if let Some(k) = &rec.content_key {
                check_token("content_key", k)?;
            }
            if position.insert(rec.image_id.clone(), i).is_some() {
                return Err(CatalogError::DuplicateImage(rec.image_id.clone()));
            }
            match branch_chain.get(&rec.branch_id) {
                Some(existing) if existing != &rec.chain_id => {
                    return Err(CatalogError::ChainConflict {
                        branch: rec.branch_id.clone(),
                        first: existing.clone().unwrap_or_else(|| "<unknown>".into()),
                        second: rec.chain_id.clone().unwrap_or_else(|| "<unknown>".into()),
                    });
                }
                Some(_) => {}
                None => {
                    branch_chain.insert(rec.branch_id.clone(), rec.chain_id.clone());
                }
            }
            branch_index
                .entry(rec.branch_id.clone())
                .or_default()
                .push(rec.image_id.clone());
        }

        let mut chain_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut unknown_branches = BTreeSet::new();
        for (branch, chain) in &branch_chain {
            match chain {
                Some(c) => {
                    chain_index.entry(c.clone()).or_default().insert(branch.clone());
                }
                None => {
                    unknown_branches.insert(branch.clone());
                }
            }
        }

        Ok(Self {
            records,
            branch_index,
            chain_index,
            branch_chain,
            unknown_branches,
            position,
        })
    }

    pub fn empty() -> Self {
        Self::from_records(Vec::new()).expect("empty catalog is valid")
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.position.get(image_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.position.contains_key(image_id)
    }

    /// branch_id → image ids (record order).
    pub fn branch_index(&self) -> &BTreeMap<String, Vec<String>> {
        &self.branch_index
    }

    /// Known chain_id → branch ids.
    pub fn chain_index(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.chain_index
    }

    pub fn unknown_branches(&self) -> &BTreeSet<String> {
        &self.unknown_branches
    }

    pub fn branch_images(&self, branch: &str) -> &[String] {
        self.branch_index.get(branch).map_or(&[], Vec::as_slice)
    }

    /// Chain of a branch; `None` both for unknown chains and unknown branches.
    pub fn chain_of_branch(&self, branch: &str) -> Option<&str> {
        self.branch_chain.get(branch).and_then(|c| c.as_deref())
    }

    pub fn branch_of(&self, image_id: &str) -> Option<&str> {
        self.get(image_id).map(|r| r.branch_id.as_str())
    }

    pub fn chain_of(&self, image_id: &str) -> Option<&str> {
        self.get(image_id).and_then(|r| r.chain_id.as_deref())
    }

    /// Known chains, sorted.
    pub fn known_chains(&self) -> impl Iterator<Item = &str> {
        self.chain_index.keys().map(String::as_str)
    }

    /// Branches with a known chain, sorted.
    pub fn known_branches(&self) -> impl Iterator<Item = &str> {
        self.branch_chain
            .iter()
            .filter(|(_, c)| c.is_some())
            .map(|(b, _)| b.as_str())
    }

    pub fn branch_count(&self) -> usize {
        self.branch_index.len()
    }

    /// Parses the catalog CSV format from any reader.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .quoting(false)
            .from_reader(reader);

        let header = rdr.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 2 || cols.len() > 4 || cols.iter().zip(CSV_HEADER).any(|(a, b)| *a != b) {
            return Err(CatalogError::Header(cols.join(",")));
        }

        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() < 2 || row.len() > 4 {
                return Err(CatalogError::Row {
                    line,
                    message: format!("expected 2 to 4 fields, found {}", row.len()),
                });
            }
            let optional = |i: usize| row.get(i).filter(|s| !s.is_empty()).map(str::to_owned);
            records.push(ImageRecord {
                image_id: row[0].to_owned(),
                branch_id: row[1].to_owned(),
                chain_id: optional(2),
                content_key: optional(3),
                feature_ref: None,
            });
        }
        Self::from_records(records)
    }

    /// Writes the catalog CSV format (always all four columns).
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .quote_style(csv::QuoteStyle::Never)
            .from_writer(writer);
        wtr.write_record(CSV_HEADER)?;
        for r in &self.records {
            wtr.write_record([
                r.image_id.as_str(),
                r.branch_id.as_str(),
                r.chain_id.as_deref().unwrap_or(""),
                r.content_key.as_deref().unwrap_or(""),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.to_writer(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("catalog tokens are UTF-8")
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    let file = std::fs::File::open(path)?;
    Catalog::from_reader(std::io::BufReader::new(file))
}

pub fn save_catalog(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    catalog.to_writer(std::io::BufWriter::new(file))
}

/// Counts mirroring the images / branches / chains summary table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogStats {
    pub images: usize,
    pub branches: usize,
    /// Known chains only.
    pub chains: usize,
    pub unknown_branches: usize,
    /// branch size → number of branches with that size.
    pub branch_size_histogram: BTreeMap<usize, usize>,
}

pub fn stats(catalog: &Catalog) -> CatalogStats {
    let mut hist = BTreeMap::new();
    for ids in catalog.branch_index.values() {
        *hist.entry(ids.len()).or_insert(0) += 1;
    }
    CatalogStats {
        images: catalog.len(),
        branches: catalog.branch_count(),
        chains: catalog.chain_index.len(),
        unknown_branches: catalog.unknown_branches.len(),
        branch_size_histogram: hist,
    }
}

/// A duplicate group that could not be merged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedMerge {
    pub branches: Vec<String>,
    pub chains: Vec<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    /// Each group is sorted; its first entry is the surviving branch id.
    pub merged_groups: Vec<Vec<String>>,
    pub dropped: Vec<String>,
    pub skipped: Vec<SkippedMerge>,
}

impl DedupReport {
    pub fn is_empty(&self) -> bool {
        self.merged_groups.is_empty() && self.dropped.is_empty() && self.skipped.is_empty()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // smaller index wins; indices follow sorted branch ids
        match ra.cmp(&rb) {
            std::cmp::Ordering::Less => self.parent[rb] = ra,
            std::cmp::Ordering::Greater => self.parent[ra] = rb,
            std::cmp::Ordering::Equal => {}
        }
    }
}

/// Merges branches that share a `content_key` and drops the duplicate copies.
///
/// Branches linked (transitively) by a shared key collapse into the
/// lexicographically smallest branch id. Inside a merged branch only the
/// first record (catalog order) of each content key survives. Groups whose
/// branches carry more than one distinct known chain are left untouched and
/// reported in `skipped`. A group mixing one known chain with unknown-chain
/// branches takes the known chain.
pub fn dedup_merge(catalog: &Catalog) -> (Catalog, DedupReport) {
    let branches: Vec<&String> = catalog.branch_index.keys().collect();
    let branch_pos: HashMap<&str, usize> = branches
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), i))
        .collect();

    let mut by_key: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for rec in &catalog.records {
        if let Some(k) = &rec.content_key {
            by_key.entry(k.as_str()).or_default().push(branch_pos[rec.branch_id.as_str()]);
        }
    }

    let mut uf = UnionFind::new(branches.len());
    for members in by_key.values() {
        for &b in &members[1..] {
            uf.union(members[0], b);
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..branches.len() {
        let root = uf.find(i);
        groups.entry(root).or_default().push(i);
    }

    let mut report = DedupReport::default();
    // branch → (target branch, chain of the merged branch)
    let mut relabel: HashMap<&str, (&str, Option<&str>)> = HashMap::new();
    for members in groups.values().filter(|m| m.len() > 1) {
        let names: Vec<String> = members.iter().map(|&i| branches[i].clone()).collect();
        let chains: BTreeSet<&str> = members
            .iter()
            .filter_map(|&i| catalog.chain_of_branch(branches[i]))
            .collect();
        if chains.len() > 1 {
            report.skipped.push(SkippedMerge {
                branches: names,
                chains: chains.iter().map(|c| c.to_string()).collect(),
                reason: "duplicate images span branches of different known chains".into(),
            });
            continue;
        }
        let target = branches[members[0]].as_str();
        let chain = chains.into_iter().next();
        for &i in members {
            relabel.insert(branches[i].as_str(), (target, chain));
        }
        report.merged_groups.push(names);
    }

    if relabel.is_empty() {
        return (catalog.clone(), report);
    }

    let mut seen: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut records = Vec::with_capacity(catalog.records.len());
    for rec in &catalog.records {
        let Some(&(target, chain)) = relabel.get(rec.branch_id.as_str()) else {
            records.push(rec.clone());
            continue;
        };
        if let Some(k) = &rec.content_key {
            if !seen.insert((target, k.as_str())) {
                report.dropped.push(rec.image_id.clone());
                continue;
            }
        }
        let mut out = rec.clone();
        out.branch_id = target.to_owned();
        out.chain_id = chain.map(str::to_owned);
        records.push(out);
    }

    let merged = Catalog::from_records(records).expect("relabeling preserves catalog invariants");
    (merged, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Catalog> {
        Catalog::from_reader(s.as_bytes())
    }

    #[test]
    fn loads_three_rows() {
        let c = parse("image_id,branch_id,chain_id,content_key\na.jpg,b1,c1,\nb.jpg,b1,c1,\nc.jpg,b2,,\n").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.branch_count(), 2);
        assert_eq!(c.chain_index().len(), 1);
        assert_eq!(c.unknown_branches().iter().collect::<Vec<_>>(), vec!["b2"]);
        assert_eq!(c.chain_of("c.jpg"), None);
    }

    #[test]
    fn short_header_and_rows_accepted() {
        let c = parse("image_id,branch_id,chain_id\na,b1,c1\nb,b2\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.chain_of_branch("b2"), None);
    }

    #[test]
    fn header_only_is_empty() {
        let c = parse("image_id,branch_id,chain_id,content_key\n").unwrap();
        assert!(c.is_empty());
        assert_eq!(stats(&c).images, 0);
    }

    #[test]
    fn duplicate_id_is_an_error() {
        let err = parse("image_id,branch_id,chain_id,content_key\nx,b1,c1,\nx,b9,c2,\n").unwrap_err();
        assert!(matches!(err, CatalogError::DuplicateImage(ref id) if id == "x"), "{err}");
    }

    #[test]
    fn chain_conflict_names_branch() {
        let err = parse("image_id,branch_id,chain_id\nx,b1,c1\ny,b1,c2\n").unwrap_err();
        assert!(matches!(err, CatalogError::ChainConflict { ref branch, .. } if branch == "b1"));
        // known vs unknown also conflicts
        let err = parse("image_id,branch_id,chain_id\nx,b1,c1\ny,b1,\n").unwrap_err();
        assert!(matches!(err, CatalogError::ChainConflict { .. }));
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(parse("id,branch\na,b\n"), Err(CatalogError::Header(_))));
    }

    #[test]
    fn quote_in_id_rejected() {
        let err = Catalog::from_records(vec![ImageRecord::new("a\"b", "b1", None)]).unwrap_err();
        assert!(matches!(err, CatalogError::InvalidToken { .. }));
    }

    #[test]
    fn stats_counts() {
        let c = parse("image_id,branch_id,chain_id,content_key\na.jpg,b1,c1,\nb.jpg,b1,c1,\nc.jpg,b2,,\n").unwrap();
        let s = stats(&c);
        assert_eq!((s.images, s.branches, s.chains, s.unknown_branches), (3, 2, 1, 1));
        assert_eq!(s.branch_size_histogram, BTreeMap::from([(1, 1), (2, 1)]));
    }

    #[test]
    fn dedup_merges_shared_key() {
        let c = Catalog::from_records(vec![
            ImageRecord::new("i1", "b1", Some("c1")).with_content_key("k"),
            ImageRecord::new("i2", "b2", Some("c1")).with_content_key("k"),
            ImageRecord::new("i3", "b2", Some("c1")).with_content_key("z"),
        ])
        .unwrap();
        let (out, report) = dedup_merge(&c);
        assert_eq!(report.merged_groups, vec![vec!["b1".to_string(), "b2".to_string()]]);
        assert_eq!(report.dropped, vec!["i2".to_string()]);
        assert!(report.skipped.is_empty());
        assert_eq!(out.len(), 2);
        assert_eq!(out.branch_of("i3"), Some("b1"));
        let s = stats(&out);
        assert_eq!((s.images, s.branches, s.chains), (2, 1, 1));
    }

    #[test]
    fn dedup_identity_without_shared_keys() {
        let c = Catalog::from_records(vec![
            ImageRecord::new("i1", "b1", Some("c1")).with_content_key("k1"),
            ImageRecord::new("i2", "b2", None).with_content_key("k2"),
            ImageRecord::new("i3", "b2", None),
        ])
        .unwrap();
        let (out, report) = dedup_merge(&c);
        assert_eq!(out, c);
        assert!(report.is_empty());
    }

    #[test]
    fn dedup_skips_chain_conflict() {
        let c = Catalog::from_records(vec![
            ImageRecord::new("i1", "b1", Some("c1")).with_content_key("k"),
            ImageRecord::new("i2", "b2", Some("c2")).with_content_key("k"),
        ])
        .unwrap();
        let (out, report) = dedup_merge(&c);
        assert_eq!(out, c);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].chains, vec!["c1", "c2"]);
        assert!(report.merged_groups.is_empty());
    }

    #[test]
    fn dedup_unknown_joins_known_chain() {
        let c = Catalog::from_records(vec![
            ImageRecord::new("i1", "b2", None).with_content_key("k"),
            ImageRecord::new("i2", "b1", Some("c1")).with_content_key("k"),
        ])
        .unwrap();
        let (out, report) = dedup_merge(&c);
        assert_eq!(report.dropped, vec!["i2".to_string()]);
        assert_eq!(out.chain_of("i1"), Some("c1"));
        assert_eq!(out.branch_of("i1"), Some("b1"));
    }

    #[test]
    fn report_json_shape() {
        let report = DedupReport {
            merged_groups: vec![vec!["b1".into(), "b2".into()]],
            dropped: vec!["i2".into()],
            skipped: vec![],
        };
        let v: serde_json::Value = serde_json::to_value(&report).unwrap();
        assert_eq!(v["merged_groups"][0][1], "b2");
        assert_eq!(v["dropped"][0], "i2");
        assert!(v["skipped"].as_array().unwrap().is_empty());
    }
}
