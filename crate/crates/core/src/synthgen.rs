//! Synthetic chain → branch → image corpora.
//!
//! Features follow an additive Gaussian hierarchy: each chain draws a latent
//! `u_c ~ N(0, σ_c² I)`, each of its branches `v_b = u_c + N(0, σ_b² I)`, and
//! each image `x = v_b + N(0, σ_n² I)`. Branches of one chain therefore share
//! structure that a model can carry over to branches it never saw in
//! training, while a new chain brings nothing familiar.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ImageRecord};
use crate::embedstore::EmbeddingMatrix;
use crate::rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_chains: usize,
    pub branches_per_chain: usize,
    pub images_per_branch: usize,
    /// Fraction of chains whose branches lose their chain label; the count is
    /// `round(fraction · n_chains)`.
    pub unknown_chain_fraction: f64,
    pub d_in: usize,
    pub sigma_c: f64,
    pub sigma_b: f64,
    pub sigma_n: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The standard corpus: 40 chains × 8 branches × 20 images, 15% unknown.
    fn default() -> Self {
        Self {
            n_chains: 40,
            branches_per_chain: 8,
            images_per_branch: 20,
            unknown_chain_fraction: 0.15,
            d_in: 32,
            sigma_c: 1.0,
            sigma_b: 0.5,
            sigma_n: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_chains == 0 || self.branches_per_chain == 0 || self.images_per_branch == 0 || self.d_in == 0 {
            return bad("counts and d_in must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.unknown_chain_fraction) {
            return bad(format!("unknown_chain_fraction {} outside [0, 1]", self.unknown_chain_fraction));
        }
        if !(self.sigma_c > 0.0 && self.sigma_c.is_finite()) {
            return bad(format!("sigma_c must be positive, got {}", self.sigma_c));
        }
        if !(self.sigma_n > 0.0 && self.sigma_b > self.sigma_n && self.sigma_b.is_finite()) {
            return bad(format!(
                "need sigma_b > sigma_n > 0, got sigma_b = {}, sigma_n = {}",
                self.sigma_b, self.sigma_n
            ));
        }
        Ok(())
    }

    /// Number of chains generated without a chain label.
    pub fn unknown_chains(&self) -> usize {
        ((self.unknown_chain_fraction * self.n_chains as f64).round() as usize).min(self.n_chains)
    }
}

pub fn chain_id(c: usize) -> String {
    format!("c{c:03}")
}

pub fn branch_id(c: usize, b: usize) -> String {
    format!("c{c:03}_b{b:02}")
}

pub fn image_id(c: usize, b: usize, i: usize) -> String {
    format!("c{c:03}_b{b:02}_i{i:03}")
}

fn gaussian<R: Rng>(rng: &mut R, center: &[f64], sigma: f64) -> Vec<f64> {
    center.iter().map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates the catalog and the matching input-feature matrix (row order
/// equals catalog record order, recorded in each record's `feature_ref`).
pub fn generate(config: &SynthConfig) -> Result<(Catalog, EmbeddingMatrix), SynthError> {
    config.validate()?;
    let mut pick = rng::substream(config.seed, 1);
    let mut chains: Vec<usize> = (0..config.n_chains).collect();
    chains.shuffle(&mut pick);
    let mut unknown = vec![false; config.n_chains];
    for &c in &chains[..config.unknown_chains()] {
        unknown[c] = true;
    }

    let mut rng = rng::seeded(config.seed);
    let zero = vec![0.0; config.d_in];
    let total = config.n_chains * config.branches_per_chain * config.images_per_branch;
    let mut records = Vec::with_capacity(total);
    let mut features = Vec::with_capacity(total * config.d_in);
    for c in 0..config.n_chains {
        let u = gaussian(&mut rng, &zero, config.sigma_c);
        let chain = chain_id(c);
        for b in 0..config.branches_per_chain {
            let v = gaussian(&mut rng, &u, config.sigma_b);
            let branch = branch_id(c, b);
            for i in 0..config.images_per_branch {
                features.extend(gaussian(&mut rng, &v, config.sigma_n));
                let mut record = ImageRecord::new(image_id(c, b, i), branch.clone(), (!unknown[c]).then_some(chain.as_str()));
                record.feature_ref = Some(records.len());
                records.push(record);
            }
        }
    }

    let ids = records.iter().map(|r| r.image_id.clone()).collect();
    let data = Array2::from_shape_vec((total, config.d_in), features).expect("shape matches generated rows");
    let matrix = EmbeddingMatrix::from_f64(ids, &data).expect("generated features are finite with unique ids");
    let catalog = Catalog::from_records(records).expect("generated ids are valid tokens");
    Ok((catalog, matrix))
}
