//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use splitmetric_core::{Catalog, EmbeddingMatrix, ImageRecord, LinkOracle, SplitAssignment, SplitConfig, SplitName};

pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Shape of a random catalog.
#[derive(Debug, Clone, Copy)]
pub struct CatalogShape {
    pub chains: usize,
    pub branches: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub unknown_frac: f64,
}

/// Every chain gets at least one branch; the rest land uniformly. Unknown
/// chains keep their branches but lose the label.
pub fn random_catalog(seed: u64, shape: CatalogShape) -> Catalog {
    let mut r = rng(seed);
    let mut owner: Vec<usize> = (0..shape.chains).collect();
    owner.extend((shape.chains..shape.branches).map(|_| r.random_range(0..shape.chains)));
    owner.shuffle(&mut r);
    let unknown = (shape.unknown_frac * shape.chains as f64).floor() as usize;
    let mut records = Vec::new();
    for (b, &c) in owner.iter().enumerate() {
        let size = r.random_range(shape.min_size..=shape.max_size);
        let chain = format!("ch{c:02}");
        let label = (c >= unknown).then_some(chain.as_str());
        for i in 0..size {
            records.push(ImageRecord::new(format!("b{b:03}_{i:02}"), format!("b{b:03}"), label));
        }
    }
    Catalog::from_records(records).unwrap()
}

/// Random shape within the ranges of the split-constraint suite.
pub fn suite_shape<R: Rng>(r: &mut R) -> CatalogShape {
    let chains = r.random_range(10..=50);
    CatalogShape {
        chains,
        // at least three branches per chain on average keeps the su stage feasible
        branches: r.random_range((3 * chains).max(50)..=800),
        min_size: 3,
        max_size: 80,
        unknown_frac: r.random_range(0.0..=0.3),
    }
}

pub fn suite_config<R: Rng>(r: &mut R, seed: u64) -> SplitConfig {
    let t2 = r.random_range(1..=3);
    let ss_divisor = r.random_range(2..=5);
    SplitConfig {
        seed,
        uu_chain_fraction: r.random_range(0.05..0.3),
        su_branch_fraction: r.random_range(0.05..0.3),
        t1: r.random_range(t2 * ss_divisor..=30),
        t2,
        ss_divisor,
    }
}

/// Independent recomputation of every split constraint from set algebra.
/// Returns the violated constraint names.
pub fn split_violations(cat: &Catalog, a: &SplitAssignment, cfg: Option<&SplitConfig>) -> Vec<String> {
    let mut bad = Vec::new();
    let by = |s: SplitName| -> Vec<&ImageRecord> {
        cat.records().iter().filter(|r| a.get(&r.image_id) == Some(s)).collect()
    };
    let branches = |rs: &[&ImageRecord]| rs.iter().map(|r| r.branch_id.clone()).collect::<BTreeSet<_>>();
    let chains = |rs: &[&ImageRecord]| rs.iter().filter_map(|r| r.chain_id.clone()).collect::<BTreeSet<_>>();

    let ids: BTreeSet<&String> = cat.records().iter().map(|r| &r.image_id).collect();
    let assigned: BTreeSet<&String> = a.assignment.keys().collect();
    if ids != assigned {
        bad.push("partition".into());
    }
    let train = by(SplitName::Train);
    let trainval: Vec<&ImageRecord> = [SplitName::Train, SplitName::ValSs, SplitName::ValSu, SplitName::ValUu]
        .into_iter()
        .flat_map(by)
        .collect();

    for (name, ss, su, uu, seen) in [
        ("test", SplitName::TestSs, SplitName::TestSu, SplitName::TestUu, &trainval),
        ("val", SplitName::ValSs, SplitName::ValSu, SplitName::ValUu, &train),
    ] {
        let seen_b = branches(seen);
        let seen_c = chains(seen);
        let ss_r = by(ss);
        if !branches(&ss_r).is_subset(&seen_b) {
            bad.push(format!("{name}_ss_seen"));
        }
        if let Some(cfg) = cfg {
            let mut per: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &ss_r {
                *per.entry(&r.branch_id).or_default() += 1;
            }
            for (b, k) in per {
                let n = cat.branch_images(b).len();
                // the ss bound applies to the branch as it stood before this level
                let before = if name == "test" { n } else { n - by_branch(cat, a, b, SplitName::TestSs) };
                if k < cfg.t2 || k > before / cfg.ss_divisor {
                    bad.push(format!("{name}_ss_bounds:{b}"));
                }
            }
        }
        let su_r = by(su);
        if !branches(&su_r).is_disjoint(&seen_b) || !chains(&su_r).is_subset(&seen_c) {
            bad.push(format!("{name}_su_unseen_branch"));
        }
        if !chains(&by(uu)).is_disjoint(&seen_c) {
            bad.push(format!("{name}_uu_unseen_chain"));
        }
    }

    let unk: BTreeSet<&String> = by(SplitName::TestUnk).iter().map(|r| &r.image_id).collect();
    let unknown: BTreeSet<&String> = cat.records().iter().filter(|r| r.chain_id.is_none()).map(|r| &r.image_id).collect();
    if unk != unknown {
        bad.push("test_unk_exact".into());
    }

    let known: BTreeSet<String> = cat.records().iter().filter_map(|r| r.chain_id.clone()).collect();
    let rest: BTreeSet<String> = known.difference(&chains(&by(SplitName::TestUu))).cloned().collect();
    if rest != chains(&trainval) {
        bad.push("train_chains_rest".into());
    }
    bad
}

fn by_branch(cat: &Catalog, a: &SplitAssignment, branch: &str, split: SplitName) -> usize {
    cat.branch_images(branch).iter().filter(|id| a.get(id) == Some(split)).count()
}

/// `(2·wins + ties) / (2PN)` over all pairs.
pub fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &p in pos {
        for &n in neg {
            twice += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

/// f64 cosine between two f32 rows.
pub fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn row(m: &EmbeddingMatrix, i: usize) -> Vec<f32> {
    m.row(i).to_vec()
}

/// Full sort of every gallery row by (similarity desc, index asc).
pub fn brute_knn(q: &EmbeddingMatrix, g: &EmbeddingMatrix, k: usize, exclude_self: bool) -> Vec<Vec<usize>> {
    (0..q.rows())
        .map(|i| {
            let qi = row(q, i);
            let mut all: Vec<(f64, usize)> = (0..g.rows())
                .filter(|&j| !(exclude_self && g.ids()[j] == q.ids()[i]))
                .map(|j| (cos(&qi, &row(g, j)), j))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|x| x.1).collect()
        })
        .collect()
}

/// R@1 by scanning every other image; ties go to the smaller id.
pub fn brute_r_at_1(emb: &EmbeddingMatrix, oracle: &LinkOracle, images: &[String]) -> f64 {
    let mut ids = images.to_vec();
    ids.sort();
    let mut hits = 0;
    let mut anchors = 0;
    for a in &ids {
        let la = oracle.label(a).unwrap();
        if !ids.iter().any(|b| b != a && oracle.label(b) == Some(la)) {
            continue;
        }
        anchors += 1;
        let ra = row(emb, emb.position(a).unwrap());
        let mut best: Option<(f64, &String)> = None;
        for b in ids.iter().filter(|b| *b != a) {
            let s = cos(&ra, &row(emb, emb.position(b).unwrap()));
            if best.is_none_or(|(bs, bid)| s > bs || (s == bs && b < bid)) {
                best = Some((s, b));
            }
        }
        if oracle.label(best.unwrap().1) == Some(la) {
            hits += 1;
        }
    }
    hits as f64 / anchors as f64
}

/// Fourth-order central difference of the head loss in one parameter of
/// `W` (row-major) followed by `b`.
pub fn head_numeric(
    model: &splitmetric_core::ToyModel,
    x: ndarray::ArrayView2<f64>,
    labels: &[usize],
    kind: splitmetric_core::LossKind,
    p: &splitmetric_core::LossParams,
    bank: Option<&ndarray::Array2<f64>>,
    coord: usize,
    h: f64,
) -> f64 {
    let at = |delta: f64| {
        let mut m = model.clone();
        let n_w = m.w.len();
        if coord < n_w {
            let cols = m.w.ncols();
            m.w[[coord / cols, coord % cols]] += delta;
        } else {
            m.b[coord - n_w] += delta;
        }
        m.loss_and_grad(x, labels, kind, p, bank.map(|b| b.view())).unwrap().value
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

/// Largest relative error between the analytic head gradient and
/// [`head_numeric`] on a random 12 × 6 batch through a 6 → 4 head, or `None`
/// when the batch sits within 1e-2 of a hinge or mining threshold.
pub fn head_gradient_error(kind: splitmetric_core::LossKind, seed: u64) -> Option<f64> {
    use splitmetric_core::losses::{gradcheck::random_unit_rows, kink_distance};
    use splitmetric_core::{LossKind, LossParams, ToyModel};
    let p = LossParams::default();
    let (rows, d_in, d_out, classes) = (12, 6, 4, 3);
    let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
    let mut r = splitmetric_core::rng::seeded(seed);
    // scaled and shifted so the layer norm has work to do
    let x = random_unit_rows(&mut r, rows, d_in).mapv(|v| 3.0 * v + 0.5);
    let model = ToyModel::init(d_in, d_out, seed).unwrap();
    let y = model.forward(x.view()).unwrap();
    if kink_distance(kind, y.view(), &labels, &p) < 1e-2 {
        return None;
    }
    let bank = match kind {
        LossKind::ProxyNca => Some(random_unit_rows(&mut r, classes, d_out)),
        LossKind::SoftTriple => Some(random_unit_rows(&mut r, classes * p.softtriple.centers_per_class, d_out)),
        _ => None,
    };
    let g = model.loss_and_grad(x.view(), &labels, kind, &p, bank.as_ref().map(|b| b.view())).unwrap();
    let analytic: Vec<f64> = g.w.iter().chain(g.b.iter()).copied().collect();
    let mut worst: f64 = 0.0;
    for (coord, &a) in analytic.iter().enumerate() {
        let n = head_numeric(&model, x.view(), &labels, kind, &p, bank.as_ref(), coord, 1e-4);
        // coordinates with no gradient at all are compared absolutely
        let err = if n.abs() < 1e-10 && a.abs() < 1e-10 { 0.0 } else { (a - n).abs() / n.abs().max(1e-8) };
        worst = worst.max(err);
    }
    Some(worst)
}
