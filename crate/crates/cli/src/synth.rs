//! Synthetic interaction logs and matching item embeddings.
//!
//! Items are grouped into clusters. A user starts at a random item and then,
//! with probability `follow`, moves to the next item of the same cluster
//! (cyclically); otherwise it jumps to a uniformly random item.

use anyhow::{ensure, Result};
use mtgrec_core::data::Dataset;
use mtgrec_core::embeddings::{synth_embeddings, SemanticEmbeddingMatrix};
use mtgrec_core::seed;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub dim: usize,
    pub spread: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub follow: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 400,
            clusters: 8,
            items_per_cluster: 8,
            dim: 16,
            spread: 0.3,
            min_len: 6,
            max_len: 14,
            follow: 0.8,
        }
    }
}

pub fn item_name(i: usize) -> String {
    format!("item{i:05}")
}

/// Raw `(user, items)` records before any filtering.
pub fn synth_records(config: &SynthConfig, seed_value: u64) -> Result<Vec<(String, Vec<String>)>> {
    ensure!(
        config.clusters > 0 && config.items_per_cluster > 0,
        "synthetic data needs at least one cluster and one item per cluster"
    );
    ensure!(
        config.min_len >= 5 && config.min_len <= config.max_len,
        "synthetic sequence lengths must satisfy 5 <= min_len <= max_len"
    );
    ensure!((0.0..=1.0).contains(&config.follow), "follow must lie in [0, 1]");
    let items = config.clusters * config.items_per_cluster;
    let per = config.items_per_cluster;
    let mut rng = seed::rng(seed::derive(seed_value, "synth-interactions"));
    let mut out = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut cur = rng.random_range(0..items);
        let mut seq = vec![item_name(cur)];
        for _ in 1..len {
            cur = if rng.random_bool(config.follow) {
                (cur / per) * per + (cur % per + 1) % per
            } else {
                rng.random_range(0..items)
            };
            seq.push(item_name(cur));
        }
        out.push((format!("user{u:05}"), seq));
    }
    Ok(out)
}

/// Embedding rows in the dataset's catalog order.
pub fn synth_item_embeddings(
    config: &SynthConfig,
    dataset: &Dataset,
    seed_value: u64,
) -> Result<SemanticEmbeddingMatrix> {
    let all = config.clusters * config.items_per_cluster;
    let full = synth_embeddings(
        config.clusters,
        config.items_per_cluster,
        config.dim,
        config.spread,
        seed::derive(seed_value, "synth-embeddings"),
        all,
    )?;
    let catalog = &dataset.catalog;
    let mut rows = Array2::zeros((catalog.len(), config.dim));
    for c in 0..catalog.len() {
        let original: usize = catalog.item_id(c)["item".len()..].parse()?;
        rows.row_mut(c).assign(&full.rows().row(original));
    }
    Ok(SemanticEmbeddingMatrix::new(rows)?)
}
