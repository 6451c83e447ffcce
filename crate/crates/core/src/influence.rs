//! First-order influence of each tokenizer's data group on the validation
//! loss, and the softmax curriculum built from cumulative influence.
//!
//! For a group with gradient `g_i`, the Adam direction one hypothetical step
//! ahead is `Γ_i = m̂′ / √(v̂′ + ε)`. Stepping `θ − η_t Γ_i` changes the
//! validation loss by about `−η_t ⟨∇ℒ_val, Γ_i⟩`; that dot product scaled by
//! `η_t` is the influence `I`.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::recommender::{batch_gradient, EncodedPair, ModelParams};
use crate::report::sig6;

/// Gradient in the canonical flattening of [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlatGradient(Vec<f64>);

impl FlatGradient {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &FlatGradient) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

/// Read-only view of optimizer moments.
#[derive(Clone, Copy, Debug)]
pub struct AdamMirror<'a> {
    pub m: &'a [f64],
    pub v: &'a [f64],
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<'a> AdamMirror<'a> {
    pub fn of(adam: &'a Adam) -> Self {
        Self {
            m: &adam.m,
            v: &adam.v,
            t: adam.t,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }

    pub fn with_moments(m: &'a [f64], v: &'a [f64], t: u64) -> Self {
        Self {
            m,
            v,
            t,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Mean sequence gradient over `pairs`, summed in pair order.
pub fn validation_gradient(params: &ModelParams, pairs: &[EncodedPair]) -> Result<(f64, FlatGradient)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let (loss, grad) = batch_gradient(params, pairs, None)?;
    Ok((loss, FlatGradient::new(grad)?))
}

/// Adam direction of one hypothetical step on `group_gradient`, with bias
/// correction at step `t + 1` and `ε` under the square root.
pub fn group_gamma(group_gradient: &FlatGradient, mirror: AdamMirror) -> Result<FlatGradient> {
    let g = group_gradient.values();
    if g.len() != mirror.m.len() || g.len() != mirror.v.len() {
        return Err(Error::DimensionMismatch {
            expected: mirror.m.len(),
            got: g.len(),
        });
    }
    let step = mirror.t as i32 + 1;
    let bc1 = 1.0 - mirror.beta1.powi(step);
    let bc2 = 1.0 - mirror.beta2.powi(step);
    let gamma = g
        .iter()
        .zip(mirror.m.iter().zip(mirror.v))
        .map(|(&g, (&m, &v))| {
            let m_next = (mirror.beta1 * m + (1.0 - mirror.beta1) * g) / bc1;
            let v_next = (mirror.beta2 * v + (1.0 - mirror.beta2) * g * g) / bc2;
            m_next / (v_next + mirror.eps).sqrt()
        })
        .collect();
    FlatGradient::new(gamma)
}

/// `I = η_t ⟨g_val, Γ⟩`; positive values predict a lower validation loss.
pub fn influence_score(lr: f64, g_val: &FlatGradient, gamma: &FlatGradient) -> Result<f64> {
    Ok(lr * g_val.dot(gamma)?)
}

/// Cumulative influence per tokenizer and the per-stage scores behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceLedger {
    pub cumulative: Vec<f64>,
    pub stage: usize,
    pub history: Vec<Vec<f64>>,
}

impl InfluenceLedger {
    pub fn new(n: usize) -> Self {
        Self {
            cumulative: vec![0.0; n],
            stage: 0,
            history: Vec::new(),
        }
    }

    pub fn record(&mut self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.cumulative.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cumulative.len(),
                got: scores.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("influence scores {scores:?}")));
        }
        for (c, s) in self.cumulative.iter_mut().zip(scores) {
            *c += s;
        }
        self.history.push(scores.to_vec());
        self.stage += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    pub probs: Vec<f64>,
    pub tau: f64,
}

impl SamplingDistribution {
    pub fn uniform(n: usize, tau: f64) -> Result<Self> {
        Self::from_cumulative(&vec![0.0; n], tau)
    }

    /// `softmax(Ĩ / τ)` with the maximum subtracted first.
    pub fn from_cumulative(cumulative: &[f64], tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        if cumulative.is_empty() {
            return Err(Error::InvalidArgument("no tokenizers to sample".into()));
        }
        let max = cumulative.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = cumulative.iter().map(|c| ((c - max) / tau).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(Self {
            probs: exps.iter().map(|e| e / total).collect(),
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.probs).expect("probabilities are positive and finite")
    }
}

/// Adds this stage's scores to the ledger and returns the new distribution.
pub fn update_distribution(
    ledger: &mut InfluenceLedger,
    scores: &[f64],
    tau: f64,
) -> Result<SamplingDistribution> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    ledger.record(scores)?;
    SamplingDistribution::from_cumulative(&ledger.cumulative, tau)
}

/// One row of the influence report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub stage: usize,
    pub tokenizer_epoch: usize,
    pub score: f64,
    pub cumulative: f64,
    pub probability: f64,
}

/// Per-stage audit entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub validation_pairs: usize,
    pub group_sample_sizes: Vec<usize>,
    pub validation_loss: f64,
}

pub fn write_influence_csv(rows: &[InfluenceRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "stage,tokenizer_epoch,score,cumulative,probability")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.stage,
            r.tokenizer_epoch,
            sig6(r.score),
            sig6(r.cumulative),
            sig6(r.probability)
        )?;
    }
    Ok(())
}

pub fn write_audit_jsonl(entries: &[StageAudit], mut out: impl Write) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommender::{ModelConfig, Vocabulary};
    use crate::seed;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelParams {
        let config = ModelConfig {
            d_model: 8,
            d_inner: 8,
            heads: 2,
            layers: 1,
            max_positions: 12,
            activation: crate::nn::Activation::Gelu,
            ..ModelConfig::default()
        };
        ModelParams::initialize(config, Vocabulary::new(2, 3, 3).unwrap(), &mut seed::rng(1)).unwrap()
    }

    fn pairs(seed: u64, vocab: &Vocabulary, n: usize) -> Vec<EncodedPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = |rng: &mut ChaCha8Rng| -> Vec<u32> {
            (0..3)
                .map(|l| vocab.token_id(l, rng.random_range(0..3)).unwrap())
                .collect()
        };
        (0..n)
            .map(|_| {
                let mut x = id(&mut rng);
                x.extend(id(&mut rng));
                EncodedPair { x, y: id(&mut rng) }
            })
            .collect()
    }

    #[test]
    fn validation_gradient_is_a_mean() {
        let p = tiny();
        let set = pairs(2, &p.vocab, 5);
        let (_, single) = validation_gradient(&p, &set[..1]).unwrap();
        let (_, own) = p.sequence_nll(&set[0].x, &set[0].y).unwrap();
        assert_eq!(single.values(), own.as_slice());

        let doubled = vec![set[0].clone(), set[0].clone()];
        let (_, twice) = validation_gradient(&p, &doubled).unwrap();
        for (a, b) in twice.values().iter().zip(single.values()) {
            assert!((a - b).abs() < 1e-15);
        }

        let (_, mean) = validation_gradient(&p, &set).unwrap();
        let mut sum = vec![0.0; p.parameter_count()];
        for pair in &set {
            let (_, g) = p.sequence_nll(&pair.x, &pair.y).unwrap();
            sum.iter_mut().zip(g).for_each(|(s, v)| *s += v);
        }
        for (a, s) in mean.values().iter().zip(&sum) {
            assert!((a - s / 5.0).abs() < 1e-12);
        }
        assert!(validation_gradient(&p, &[]).is_err());
    }

    #[test]
    fn gamma_examples() {
        let zeros = [0.0; 3];
        let g = FlatGradient::new(vec![0.5, -2.0, 1e-3]).unwrap();
        let gamma = group_gamma(&g, AdamMirror::with_moments(&zeros, &zeros, 0)).unwrap();
        for (x, gx) in gamma.values().iter().zip(g.values()) {
            assert!((x - gx / (gx * gx + 1e-8).sqrt()).abs() < 1e-12);
            assert_eq!(x.signum(), gx.signum());
        }
        let zero = FlatGradient::new(vec![0.0; 3]).unwrap();
        let gamma = group_gamma(&zero, AdamMirror::with_moments(&zeros, &zeros, 0)).unwrap();
        assert!(gamma.values().iter().all(|v| *v == 0.0));

        // m=0.5, v=0.25, t=10, g=1
        let m_next = (0.9 * 0.5 + 0.1) / (1.0 - 0.9f64.powi(11));
        let v_next = (0.999 * 0.25 + 0.001) / (1.0 - 0.999f64.powi(11));
        let expected = m_next / (v_next + 1e-8).sqrt();
        let one = FlatGradient::new(vec![1.0]).unwrap();
        let gamma = group_gamma(&one, AdamMirror::with_moments(&[0.5], &[0.25], 10)).unwrap();
        assert!((gamma.values()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.167_459_334_6).abs() < 1e-9);
    }

    #[test]
    fn gamma_leaves_optimizer_untouched() {
        let mut adam = Adam::new(2, 0.0);
        let mut t = vec![ndarray::Array2::zeros((1, 2))];
        adam.step(&mut t, &[0.3, -0.1], 0.01).unwrap();
        let before = adam.clone();
        let g = FlatGradient::new(vec![1.0, 2.0]).unwrap();
        group_gamma(&g, AdamMirror::of(&adam)).unwrap();
        assert_eq!(adam, before);
    }

    #[test]
    fn score_examples() {
        let g = FlatGradient::new(vec![1.0, -2.0, 0.5]).unwrap();
        assert!((influence_score(0.1, &g, &g).unwrap() - 0.1 * 5.25).abs() < 1e-15);
        let a = FlatGradient::new(vec![1.0, 0.0]).unwrap();
        let b = FlatGradient::new(vec![0.0, 3.0]).unwrap();
        assert_eq!(influence_score(0.5, &a, &b).unwrap(), 0.0);
        assert!(influence_score(0.5, &a, &g).is_err());
    }

    #[test]
    fn distribution_examples() {
        let mut ledger = InfluenceLedger::new(2);
        let d = update_distribution(&mut ledger, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(d.probs, vec![0.5, 0.5]);
        let d = update_distribution(&mut ledger, &[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((d.probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.probs[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ledger.stage, 2);
        assert!(update_distribution(&mut ledger, &[0.0, 0.0], 0.0).is_err());
        assert!(update_distribution(&mut ledger, &[0.0], 1.0).is_err());

        let flat = SamplingDistribution::from_cumulative(&[3.0, -1.0, 0.5, 7.0], 1e6).unwrap();
        assert!(flat.probs.iter().all(|p| (p - 0.25).abs() < 1e-5));
        let extreme = SamplingDistribution::from_cumulative(&[1e4, 0.0], 0.1).unwrap();
        assert!(extreme.probs.iter().all(|p| p.is_finite()));
    }

    proptest! {
        #[test]
        fn ledger_sums_history(scores in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 1..6)) {
            let mut ledger = InfluenceLedger::new(4);
            for s in &scores {
                ledger.record(s).unwrap();
            }
            for i in 0..4 {
                let total: f64 = ledger.history.iter().map(|h| h[i]).sum();
                prop_assert!((ledger.cumulative[i] - total).abs() < 1e-12);
            }
        }

        #[test]
        fn probabilities_are_normalized(cum in proptest::collection::vec(-50.0f64..50.0, 1..8), tau in 0.05f64..20.0) {
            let d = SamplingDistribution::from_cumulative(&cum, tau).unwrap();
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let top = cum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (p, c) in d.probs.iter().zip(&cum) {
                if (top - c) / tau < 700.0 {
                    prop_assert!(*p > 0.0);
                }
            }
        }

        #[test]
        fn scaling_matches_temperature(cum in proptest::collection::vec(-5.0f64..5.0, 2..6), c in 0.1f64..10.0, tau in 0.1f64..5.0) {
            let scaled: Vec<f64> = cum.iter().map(|x| x * c).collect();
            let a = SamplingDistribution::from_cumulative(&scaled, tau).unwrap();
            let b = SamplingDistribution::from_cumulative(&cum, tau / c).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let argmax = |p: &[f64]| p.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            prop_assert_eq!(argmax(&a.probs), argmax(&cum));
        }
    }

    /// Loss change after stepping along `−lr·Γ`, against the predicted `−I`.
    fn fidelity_error(lr: f64) -> (f64, f64) {
        let mut p = tiny();
        let val = pairs(3, &p.vocab, 6);
        let mut group = pairs(3, &p.vocab, 6);
        group.extend(pairs(4, &p.vocab, 2));
        let mut adam = Adam::new(p.parameter_count(), 0.0);
        for _ in 0..10 {
            crate::recommender::train_step(&mut p, &group, &mut adam, 0.01, None).unwrap();
        }
        let (base, g_val) = validation_gradient(&p, &val).unwrap();
        let (_, g_group) = validation_gradient(&p, &group).unwrap();
        let gamma = group_gamma(&g_group, AdamMirror::of(&adam)).unwrap();
        let predicted = influence_score(lr, &g_val, &gamma).unwrap();
        let moved: Vec<f64> = p
            .flatten()
            .iter()
            .zip(gamma.values())
            .map(|(t, g)| t - lr * g)
            .collect();
        let mut stepped = p.clone();
        stepped.set_flat(&moved);
        let after = crate::recommender::batch_loss(&stepped, &val).unwrap();
        ((after - base + predicted).abs(), predicted)
    }

    #[test]
    fn first_order_fidelity() {
        let (coarse, i_coarse) = fidelity_error(1e-3);
        let (fine, _) = fidelity_error(1e-4);
        assert!(coarse / i_coarse.abs().max(1e-12) < 0.05, "{coarse} vs {i_coarse}");
        assert!(coarse / fine >= 50.0, "{coarse} / {fine}");
    }

    #[test]
    fn report_formats() {
        let rows = vec![InfluenceRow {
            stage: 1,
            tokenizer_epoch: 196,
            score: 0.00123456789,
            cumulative: 0.5,
            probability: 2.0 / 3.0,
        }];
        let mut csv = Vec::new();
        write_influence_csv(&rows, &mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "stage,tokenizer_epoch,score,cumulative,probability\n1,196,0.00123457,0.5,0.666667\n"
        );
        let audit = vec![StageAudit {
            stage: 1,
            epoch: 6,
            lr: 0.004,
            validation_pairs: 10,
            group_sample_sizes: vec![3, 3],
            validation_loss: 1.5,
        }];
        let mut jsonl = Vec::new();
        write_audit_jsonl(&audit, &mut jsonl).unwrap();
        let parsed: serde_json::Value = serde_json::from_slice(&jsonl).unwrap();
        assert_eq!(parsed["group_sample_sizes"], serde_json::json!([3, 3]));
    }
}
