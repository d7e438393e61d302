//! `splitmetric`: synth → split → verify → train → eval, one subcommand per
//! stage, files as the only interface between stages.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use splitmetric_core::catalog::{self, load_catalog, save_catalog};
use splitmetric_core::embedstore::{l2_normalize, read_embeddings, write_embeddings, ids_path};
use splitmetric_core::linkeval::{self, EvalOptions, HardNegPool, LinkOracle};
use splitmetric_core::splitgen::{self, load_splits, save_splits, SplitConfig, SplitName};
use splitmetric_core::toytrainer::{self, BatchSpec, TrainConfig};
use splitmetric_core::{synthgen, LossKind, SynthConfig};

#[derive(Parser)]
#[command(name = "splitmetric", version, about = "Seen/unseen splits, metric-learning heads, image-linking evaluation")]
struct Cli {
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true, env = "SPLITMETRIC_THREADS")]
    threads: Option<usize>,

    /// Directory for outputs and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog and input features.
    Synth(SynthArgs),
    /// Merge branches that share duplicate images.
    Dedup(CatalogArg),
    /// Image, branch and chain counts of a catalog.
    Stats(CatalogArg),
    /// Assign every image to a split.
    Split(SplitArgs),
    /// Check a split file against the split constraints.
    Verify(VerifyArgs),
    /// Train an embedding head on the train split.
    Train(TrainArgs),
    /// R@1, AUC and AUC_H of embeddings on one split.
    Eval(EvalArgs),
    /// Mine hard negatives for one split from reference embeddings.
    Mine(MineArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    n_chains: usize,
    #[arg(long, default_value_t = 8)]
    branches_per_chain: usize,
    #[arg(long, default_value_t = 20)]
    images_per_branch: usize,
    #[arg(long, default_value_t = 0.15)]
    unknown_frac: f64,
    #[arg(long, default_value_t = 32)]
    d_in: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_c: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma_b: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_n: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct CatalogArg {
    #[arg(long)]
    catalog: PathBuf,
}

#[derive(Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    uu_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    su_frac: f64,
    #[arg(long, default_value_t = 25)]
    t1: usize,
    #[arg(long, default_value_t = 3)]
    t2: usize,
    #[arg(long, default_value_t = 5)]
    ss_divisor: usize,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    /// Also check per-branch `ss` sizes against these bounds.
    #[arg(long, requires = "ss_divisor")]
    t2: Option<usize>,
    #[arg(long, requires = "t2")]
    ss_divisor: Option<usize>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    /// Input features, one row per image.
    #[arg(long)]
    features: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long)]
    split: SplitName,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hard pool from `mine`; adds AUC_H.
    #[arg(long)]
    hard_pool: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct MineArgs {
    /// Reference embeddings (normalized before mining).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long)]
    split: SplitName,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

/// What a command read and wrote, for the manifest.
#[derive(Default)]
struct Run {
    config: Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        bail!("--threads must be at least 1");
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn synth(args: &SynthArgs, out: &Path) -> Result<Run> {
    let cfg = SynthConfig {
        n_chains: args.n_chains,
        branches_per_chain: args.branches_per_chain,
        images_per_branch: args.images_per_branch,
        unknown_chain_fraction: args.unknown_frac,
        d_in: args.d_in,
        sigma_c: args.sigma_c,
        sigma_b: args.sigma_b,
        sigma_n: args.sigma_n,
        seed: args.seed,
    };
    let (cat, feats) = synthgen::generate(&cfg)?;
    let cat_path = out.join("catalog.csv");
    let feat_path = out.join("features.emb");
    save_catalog(&cat, &cat_path)?;
    write_embeddings(&feats, &feat_path)?;
    Ok(Run {
        config: serde_json::to_value(&cfg)?,
        seeds: vec![args.seed],
        outputs: vec![cat_path, feat_path.clone(), ids_path(&feat_path)],
        ..Default::default()
    })
}

fn dedup(args: &CatalogArg, out: &Path) -> Result<Run> {
    let cat = load_catalog(&args.catalog).with_context(|| format!("reading {}", args.catalog.display()))?;
    let (merged, report) = catalog::dedup_merge(&cat);
    let cat_path = out.join("catalog.dedup.csv");
    let report_path = out.join("dedup_report.json");
    save_catalog(&merged, &cat_path)?;
    write_json(&report_path, &report)?;
    println!(
        "{} groups merged, {} duplicate images dropped, {} groups skipped",
        report.merged_groups.len(),
        report.dropped.len(),
        report.skipped.len()
    );
    Ok(Run {
        config: serde_json::to_value(args)?,
        inputs: vec![args.catalog.clone()],
        outputs: vec![cat_path, report_path],
        ..Default::default()
    })
}

fn stats(args: &CatalogArg, out: &Path) -> Result<Run> {
    let cat = load_catalog(&args.catalog).with_context(|| format!("reading {}", args.catalog.display()))?;
    let s = catalog::stats(&cat);
    let path = out.join("stats.json");
    write_json(&path, &s)?;
    println!(
        "{} images, {} branches, {} chains, {} branches with unknown chain",
        s.images, s.branches, s.chains, s.unknown_branches
    );
    Ok(Run {
        config: serde_json::to_value(args)?,
        inputs: vec![args.catalog.clone()],
        outputs: vec![path],
        ..Default::default()
    })
}

fn split(args: &SplitArgs, out: &Path) -> Result<Run> {
    let cat = load_catalog(&args.catalog).with_context(|| format!("reading {}", args.catalog.display()))?;
    let cfg = SplitConfig {
        seed: args.seed,
        uu_chain_fraction: args.uu_frac,
        su_branch_fraction: args.su_frac,
        t1: args.t1,
        t2: args.t2,
        ss_divisor: args.ss_divisor,
    };
    let assignment = splitgen::generate_splits(&cat, &cfg)?;
    let splits_path = out.join("splits.csv");
    let report_path = out.join("report.json");
    save_splits(&assignment, &splits_path)?;
    let check = splitgen::verify_splits(&cat, &assignment);
    write_json(
        &report_path,
        &json!({ "counts": splitgen::split_report(&cat, &assignment), "checks": check.checks }),
    )?;
    for row in splitgen::split_report(&cat, &assignment) {
        println!(
            "{:<9} {:>7} images {:>6} branches {:>5} chains",
            row.split, row.counts.images, row.counts.branches, row.counts.chains
        );
    }
    Ok(Run {
        config: serde_json::to_value(cfg)?,
        seeds: vec![args.seed],
        inputs: vec![args.catalog.clone()],
        outputs: vec![splits_path, report_path],
    })
}

fn verify(args: &VerifyArgs, out: &Path) -> Result<(Run, bool)> {
    let cat = load_catalog(&args.catalog).with_context(|| format!("reading {}", args.catalog.display()))?;
    let mut assignment = load_splits(&args.splits).with_context(|| format!("reading {}", args.splits.display()))?;
    if let (Some(t2), Some(ss_divisor)) = (args.t2, args.ss_divisor) {
        assignment.config = Some(SplitConfig {
            t2,
            ss_divisor,
            ..SplitConfig::default()
        });
    }
    let report = splitgen::verify_splits(&cat, &assignment);
    let path = out.join("verify.json");
    write_json(&path, &report)?;
    for c in &report.checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        print!("{status} {}", c.name);
        if !c.passed {
            print!(": {}", c.offending.join(", "));
        }
        println!();
    }
    for r in &assignment.rejected {
        println!("rejected row {},{}: {}", r.image_id, r.split, r.reason);
    }
    let passed = report.all_passed();
    let run = Run {
        config: serde_json::to_value(args)?,
        inputs: vec![args.catalog.clone(), args.splits.clone()],
        outputs: vec![path],
        ..Default::default()
    };
    Ok((run, passed))
}

fn train(args: &TrainArgs, out: &Path) -> Result<Run> {
    let cat = load_catalog(&args.catalog).with_context(|| format!("reading {}", args.catalog.display()))?;
    let splits = load_splits(&args.splits).with_context(|| format!("reading {}", args.splits.display()))?;
    let feats = read_embeddings(&args.features).with_context(|| format!("reading {}", args.features.display()))?;
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.loss {
        cfg.loss = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.d_out {
        cfg.d_out = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.batch = BatchSpec {
        m: args.m.unwrap_or(cfg.batch.m),
        k: args.k.unwrap_or(cfg.batch.k),
    };

    let outcome = toytrainer::train(&cat, &splits, &feats, &cfg)?;
    let model_path = out.join("model.toy");
    let history_path = out.join("history.csv");
    let emb_path = out.join("embeddings.emb");
    let cfg_path = out.join("train_config.json");
    outcome.model.save(&model_path)?;
    toytrainer::write_history(&outcome.history, fs::File::create(&history_path)?)?;
    write_embeddings(&outcome.model.embed(&feats)?, &emb_path)?;
    write_json(&cfg_path, &cfg)?;
    println!("best epoch {} of {}", outcome.best_epoch, cfg.epochs);

    let mut inputs = vec![args.catalog.clone(), args.splits.clone(), args.features.clone()];
    inputs.extend(args.config.clone());
    Ok(Run {
        config: serde_json::to_value(&cfg)?,
        seeds: vec![cfg.seed],
        inputs,
        outputs: vec![model_path, history_path, emb_path.clone(), ids_path(&emb_path), cfg_path],
    })
}

fn split_images(splits: &Path, split: SplitName) -> Result<Vec<String>> {
    let assignment = load_splits(splits).with_context(|| format!("reading {}", splits.display()))?;
    Ok(assignment.images_in(split).into_iter().map(str::to_owned).collect())
}

fn eval(args: &EvalArgs, out: &Path) -> Result<Run> {
    let cat = load_catalog(&args.catalog).with_context(|| format!("reading {}", args.catalog.display()))?;
    let images = split_images(&args.splits, args.split)?;
    let emb = read_embeddings(&args.embeddings).with_context(|| format!("reading {}", args.embeddings.display()))?;
    let oracle = LinkOracle::for_images(&cat, &images)?;
    let pool: Option<HardNegPool> = match &args.hard_pool {
        Some(p) => Some(
            serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
        ),
        None => None,
    };
    let opts = EvalOptions {
        repeats: args.repeats,
        seed: args.seed,
        hard_negatives: pool.is_some(),
    };
    let report = linkeval::evaluate(&emb, &oracle, &images, &opts, pool.as_ref())?;
    let path = out.join(format!("metrics_{}.json", args.split));
    write_json(&path, &report)?;
    println!("{}: {report}", args.split);

    let mut inputs = vec![args.embeddings.clone(), args.catalog.clone(), args.splits.clone()];
    inputs.extend(args.hard_pool.clone());
    Ok(Run {
        config: serde_json::to_value(args)?,
        seeds: vec![args.seed],
        inputs,
        outputs: vec![path],
    })
}

fn mine(args: &MineArgs, out: &Path) -> Result<Run> {
    let cat = load_catalog(&args.catalog).with_context(|| format!("reading {}", args.catalog.display()))?;
    let images = split_images(&args.splits, args.split)?;
    let reference = l2_normalize(&read_embeddings(&args.reference).with_context(|| format!("reading {}", args.reference.display()))?)?;
    let oracle = LinkOracle::for_images(&cat, &images)?;
    let pool = linkeval::mine_hard_negatives(&reference, &oracle, &images, args.k)?;
    let path = out.join(format!("hard_pool_{}.json", args.split));
    write_json(&path, &pool)?;
    println!("{} anchors, k = {}", pool.pools.len(), pool.k);
    Ok(Run {
        config: serde_json::to_value(args)?,
        inputs: vec![args.reference.clone(), args.catalog.clone(), args.splits.clone()],
        outputs: vec![path],
        ..Default::default()
    })
}

fn run(cli: &Cli) -> Result<bool> {
    configure_threads(cli.threads)?;
    let out = &cli.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let started = Instant::now();
    let (name, run, ok) = match &cli.command {
        Command::Synth(a) => ("synth", synth(a, out)?, true),
        Command::Dedup(a) => ("dedup", dedup(a, out)?, true),
        Command::Stats(a) => ("stats", stats(a, out)?, true),
        Command::Split(a) => ("split", split(a, out)?, true),
        Command::Verify(a) => {
            let (run, ok) = verify(a, out)?;
            ("verify", run, ok)
        }
        Command::Train(a) => ("train", train(a, out)?, true),
        Command::Eval(a) => ("eval", eval(a, out)?, true),
        Command::Mine(a) => ("mine", mine(a, out)?, true),
    };
    let manifest = json!({
        "command": name,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config": run.config,
        "seeds": run.seeds,
        "inputs": run.inputs,
        "outputs": run.outputs,
        "threads": cli.threads,
        "parallel": splitmetric_core::par::is_parallel(),
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    write_json(&out.join(format!("{name}.manifest.json")), &manifest)?;
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            // module errors already embed their cause's text; print each new part once
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
