//! Seen/unseen hierarchical dataset splits, deep-metric-learning loss kernels
//! with analytic gradients, and image-linking evaluation (R@1, sampled-pair
//! AUC, hard-negative AUC).
//!
//! The crate is organized bottom-up:
//!
//! - [`catalog`]: image metadata with branch (class) and chain (super-class)
//!   labels, CSV I/O, duplicate merging.
//! - [`splitgen`]: generation and verification of the train / validation /
//!   `ss`, `su`, `uu`, `unk` evaluation splits.
//! - [`embedstore`]: embedding matrices, binary I/O, exact cosine kNN.
//! - [`losses`]: six metric-learning losses plus a finite-difference checker.
//! - [`linkeval`]: AUROC, pair sampling, hard-negative mining, metric reports.
//! - [`toytrainer`]: a layer-norm → linear → L2-normalize embedding head
//!   trained with any of the losses.
//! - [`synthgen`]: synthetic chain/branch/image corpora.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.

pub mod catalog;
pub mod embedstore;
pub mod linkeval;
pub mod losses;
pub mod par;
pub mod rng;
pub mod splitgen;
pub mod synthgen;
pub mod toytrainer;

pub use catalog::{Catalog, CatalogError, CatalogStats, DedupReport, ImageRecord};
pub use embedstore::{EmbeddingMatrix, EmbedError, NeighborList};
pub use linkeval::{EvalError, EvalOptions, HardNegPool, LinkOracle, MetricReport, PairSet};
pub use losses::{Batch, LossError, LossKind, LossParams, LossResult};
pub use splitgen::{ConstraintReport, SplitAssignment, SplitConfig, SplitError, SplitName};
pub use synthgen::{SynthConfig, SynthError};
pub use toytrainer::{BatchSpec, ToyModel, TrainConfig, TrainError};
