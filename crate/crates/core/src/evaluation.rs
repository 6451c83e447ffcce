//! Full-ranking evaluation: beam-search decoding, Recall@K and NDCG@K, and a
//! long-tail report grouped by item popularity.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::family::tokenize_history;
use crate::recommender::{beam_search, identifiers_to_items, DecodeMode, ModelParams};
use crate::report::sig6;
use crate::rqvae::TokenizerCheckpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub top_k: Vec<usize>,
    pub popularity_boundaries: Vec<u64>,
    pub decode: DecodeMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_width: 50,
            top_k: vec![5, 10],
            popularity_boundaries: vec![20, 50, 100],
            decode: DecodeMode::Constrained,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let max_k = self.top_k.iter().copied().max().unwrap_or(0);
        if self.top_k.is_empty() || self.top_k.contains(&0) {
            return Err(Error::InvalidArgument("top_k needs positive cutoffs".into()));
        }
        if self.beam_width < max_k {
            return Err(Error::InvalidArgument(format!(
                "beam_width {} is below the largest cutoff {max_k}",
                self.beam_width
            )));
        }
        Ok(())
    }

    /// Cutoff used by the popularity-group report: 10 when requested,
    /// otherwise the largest one.
    pub fn group_k(&self) -> usize {
        if self.top_k.contains(&10) {
            10
        } else {
            self.top_k.iter().copied().max().unwrap_or(10)
        }
    }
}

/// 1 if `target` is among the first `k` entries.
pub fn metric_recall(ranked: &[usize], target: usize, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` for a 1-indexed rank within the first `k`, else 0.
pub fn metric_ndcg(ranked: &[usize], target: usize, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|&i| i == target)
        .map_or(0.0, |r| 1.0 / ((r + 2) as f64).log2())
}

/// Metrics of one evaluated user, aligned with the configured cutoffs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserMetrics {
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub group: Option<usize>,
}

impl UserMetrics {
    pub fn score(ranked: &[usize], target: usize, top_k: &[usize], group: Option<usize>) -> Self {
        Self {
            recall: top_k.iter().map(|&k| metric_recall(ranked, target, k)).collect(),
            ndcg: top_k.iter().map(|&k| metric_ndcg(ranked, target, k)).collect(),
            group,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupRow {
    pub group: usize,
    pub min_count: u64,
    /// Exclusive upper bound; `None` for the open last group.
    pub max_count: Option<u64>,
    pub users: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub users: usize,
    pub top_k: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub group_k: usize,
    pub groups: Vec<GroupRow>,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.top_k.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.top_k.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    /// JSON with every float printed to 6 significant digits.
    pub fn to_json(&self) -> serde_json::Value {
        let num = |x: f64| -> serde_json::Value {
            serde_json::from_str(&sig6(x)).unwrap_or(serde_json::Value::Null)
        };
        let by_k = |values: &[f64]| -> serde_json::Map<String, serde_json::Value> {
            self.top_k
                .iter()
                .zip(values)
                .map(|(k, v)| (format!("@{k}"), num(*v)))
                .collect()
        };
        serde_json::json!({
            "users": self.users,
            "recall": by_k(&self.recall),
            "ndcg": by_k(&self.ndcg),
            "group_k": self.group_k,
            "groups": self.groups.iter().map(|g| serde_json::json!({
                "group": g.group,
                "min_count": g.min_count,
                "max_count": g.max_count,
                "users": g.users,
                "recall": num(g.recall),
            })).collect::<Vec<_>>(),
        })
    }

    /// Aligned-column text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "metric");
        for k in &self.top_k {
            let _ = write!(out, "{:>12}", format!("@{k}"));
        }
        out.push('\n');
        for (name, values) in [("recall", &self.recall), ("ndcg", &self.ndcg)] {
            let _ = write!(out, "{name:<8}");
            for v in values {
                let _ = write!(out, "{:>12}", sig6(*v));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "users   {:>12}", self.users);
        out
    }

    /// CSV `group,min_count,max_count,users,recall@K`.
    pub fn write_group_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "group,min_count,max_count,users,recall@{}", self.group_k)?;
        for g in &self.groups {
            let upper = g.max_count.map_or(String::new(), |m| m.to_string());
            writeln!(out, "{},{},{},{},{}", g.group, g.min_count, upper, g.users, sig6(g.recall))?;
        }
        Ok(())
    }
}

/// Neumaier-compensated sum.
fn stable_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Means over users plus per-group recall at `group_k`.
pub fn aggregate(
    users: &[UserMetrics],
    top_k: &[usize],
    boundaries: &[u64],
    group_k: usize,
) -> MetricReport {
    let n = users.len().max(1) as f64;
    let mean = |f: &dyn Fn(&UserMetrics) -> f64| stable_sum(users.iter().map(f)) / n;
    let recall = (0..top_k.len()).map(|i| mean(&|u| u.recall[i])).collect();
    let ndcg = (0..top_k.len()).map(|i| mean(&|u| u.ndcg[i])).collect();
    let gk = top_k.iter().position(|&k| k == group_k);
    let groups = (0..=boundaries.len())
        .filter(|_| users.iter().any(|u| u.group.is_some()))
        .map(|g| {
            let members: Vec<&UserMetrics> = users.iter().filter(|u| u.group == Some(g)).collect();
            let hits = stable_sum(members.iter().map(|u| gk.map_or(0.0, |i| u.recall[i])));
            GroupRow {
                group: g,
                min_count: if g == 0 { 0 } else { boundaries[g - 1] },
                max_count: boundaries.get(g).copied(),
                users: members.len(),
                recall: if members.is_empty() { 0.0 } else { hits / members.len() as f64 },
            }
        })
        .collect();
    MetricReport {
        users: users.len(),
        top_k: top_k.to_vec(),
        recall,
        ndcg,
        group_k,
        groups,
    }
}

/// Items recommended for `history`, best first, at most `top_n`.
pub fn rank_items(
    params: &ModelParams,
    tokenizer: &TokenizerCheckpoint,
    history: &[usize],
    beam_width: usize,
    decode: DecodeMode,
    top_n: usize,
) -> Result<Vec<usize>> {
    let x = params.vocab.encode_codes(&tokenize_history(tokenizer, history)?)?;
    let beams = beam_search(params, &x, beam_width, decode)?;
    let ids: Vec<_> = beams.iter().filter_map(|b| b.identifier(params)).collect();
    Ok(identifiers_to_items(&ids, tokenizer, top_n))
}

/// Decodes every pair with `params` under `tokenizer` and scores the target.
/// `item_groups[i]` is the popularity group of item `i`, if a report by
/// group is wanted.
pub fn evaluate_full(
    params: &ModelParams,
    tokenizer: &TokenizerCheckpoint,
    pairs: &[Pair],
    item_groups: Option<&[usize]>,
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let max_k = config.top_k.iter().copied().max().unwrap_or(1);
    let users: Vec<UserMetrics> = pairs
        .par_iter()
        .map(|p| {
            let ranked = rank_items(params, tokenizer, &p.history, config.beam_width, config.decode, max_k)?;
            let group = item_groups.map(|g| g[p.target]);
            Ok(UserMetrics::score(&ranked, p.target, &config.top_k, group))
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(
        &users,
        &config.top_k,
        &config.popularity_boundaries,
        config.group_k(),
    ))
}
