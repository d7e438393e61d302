use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use splitmetric_core::catalog::{dedup_merge, stats};
use splitmetric_core::{Catalog, ImageRecord};

/// Records over up to 8 branches; each branch's chain is fixed up front (a
/// `None` chain makes it unknown), content keys come from a small alphabet
/// so duplicates are common.
fn catalog_strategy() -> impl Strategy<Value = Catalog> {
    let chains = prop::collection::vec(prop::option::weighted(0.8, 0..4u8), 8);
    let rows = prop::collection::vec((0..8usize, prop::option::of(0..12u8)), 0..60);
    (chains, rows).prop_map(|(chains, rows)| {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, (b, key))| {
                let chain = chains[b].map(|c| format!("c{c}"));
                let mut r = ImageRecord::new(format!("img{i:03}"), format!("b{b}"), chain.as_deref());
                if let Some(k) = key {
                    r = r.with_content_key(format!("k{k}"));
                }
                r
            })
            .collect();
        Catalog::from_records(records).unwrap()
    })
}

fn keys_by_branch(c: &Catalog) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in c.records() {
        if let Some(k) = &r.content_key {
            out.entry(r.branch_id.clone()).or_default().insert(k.clone());
        }
    }
    out
}

proptest! {
    #[test]
    fn csv_round_trip_is_identity(c in catalog_strategy()) {
        let text = c.to_csv_string();
        let back = Catalog::from_reader(text.as_bytes()).unwrap();
        prop_assert_eq!(back.records(), c.records());
        prop_assert_eq!(back.to_csv_string(), text);
    }

    #[test]
    fn dedup_is_idempotent(c in catalog_strategy()) {
        let (once, _) = dedup_merge(&c);
        let (twice, report) = dedup_merge(&once);
        prop_assert_eq!(twice.records(), once.records());
        // a second pass may only re-report groups it refuses to merge
        prop_assert!(report.merged_groups.is_empty() && report.dropped.is_empty());
    }

    #[test]
    fn dedup_keeps_every_content_key_of_a_merged_class(c in catalog_strategy()) {
        let (merged, report) = dedup_merge(&c);
        let before = keys_by_branch(&c);
        let after = keys_by_branch(&merged);
        for group in &report.merged_groups {
            let union: BTreeSet<String> = group.iter().filter_map(|b| before.get(b)).flatten().cloned().collect();
            prop_assert_eq!(after.get(&group[0]).cloned().unwrap_or_default(), union);
        }
        // nothing but duplicates disappears
        let kept: BTreeSet<&str> = merged.records().iter().map(|r| r.image_id.as_str()).collect();
        for r in c.records() {
            prop_assert!(kept.contains(r.image_id.as_str()) || report.dropped.contains(&r.image_id));
        }
    }

    #[test]
    fn stats_match_recount(c in catalog_strategy()) {
        let s = stats(&c);
        let branches: BTreeSet<&str> = c.records().iter().map(|r| r.branch_id.as_str()).collect();
        let chains: BTreeSet<&str> = c.records().iter().filter_map(|r| r.chain_id.as_deref()).collect();
        let unknown: BTreeSet<&str> = c.records().iter().filter(|r| r.chain_id.is_none()).map(|r| r.branch_id.as_str()).collect();
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for r in c.records() {
            *sizes.entry(&r.branch_id).or_default() += 1;
        }
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for n in sizes.values() {
            *hist.entry(*n).or_default() += 1;
        }
        prop_assert_eq!(s.images, c.records().len());
        prop_assert_eq!(s.branches, branches.len());
        prop_assert_eq!(s.chains, chains.len());
        prop_assert_eq!(s.unknown_branches, unknown.len());
        prop_assert_eq!(s.branch_size_histogram, hist);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("catalog.csv");
    let c = Catalog::from_records(vec![
        ImageRecord::new("a.jpg", "b1", Some("c1")).with_content_key("h1"),
        ImageRecord::new("b.jpg", "b2", None),
    ])
    .unwrap();
    splitmetric_core::catalog::save_catalog(&c, &path).unwrap();
    let back = splitmetric_core::catalog::load_catalog(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), c.to_csv_string().into_bytes());
    assert_eq!(back, c);
}
