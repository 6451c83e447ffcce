//! Curriculum pre-training over a tokenizer family, then per-tokenizer
//! fine-tuning and selection of the best fine-tuned model.
//!
//! Pre-training starts with every tokenizer equally likely. After the warmup
//! epochs, and then at the end of every stage, the influence of each
//! tokenizer's data group on the mixed validation loss is estimated at the
//! current parameters and optimizer state, accumulated, and turned into new
//! sampling probabilities. Each training pair draws its own tokenizer.

use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Pair, SplitBundle};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_full, EvalConfig};
use crate::family::{tokenize_pair, TokenizerFamily};
use crate::influence::{
    group_gamma, influence_score, update_distribution, validation_gradient, AdamMirror,
    InfluenceLedger, SamplingDistribution, StageAudit,
};
use crate::optim::{cosine_lr, Adam};
use crate::recommender::{train_step, EncodedPair, ModelConfig, ModelParams, Vocabulary};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingGranularity {
    #[default]
    PerPair,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub stage_epochs: usize,
    pub tau: f64,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    /// Pairs per group used for the group gradient at each stage.
    pub group_sample: usize,
    /// Validation pairs per tokenizer for the validation gradient; 0 uses all.
    pub validation_sample: usize,
    pub weight_decay: f64,
    pub sampling: SamplingGranularity,
    /// Selection cutoff for fine-tuned models.
    pub select_k: usize,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            total_epochs: 20,
            warmup_epochs: 6,
            stage_epochs: 2,
            tau: 1.0,
            pretrain_lr: 0.005,
            finetune_lr: 0.001,
            finetune_epochs: 5,
            batch_size: 32,
            group_sample: 256,
            validation_sample: 0,
            weight_decay: 0.0,
            sampling: SamplingGranularity::PerPair,
            select_k: 10,
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    /// 200 epochs, 60 of warmup, stages of 20.
    pub fn full_scale() -> Self {
        Self {
            total_epochs: 200,
            warmup_epochs: 60,
            stage_epochs: 20,
            finetune_lr: 0.0002,
            finetune_epochs: 50,
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.stage_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "total_epochs, stage_epochs and batch_size must be positive".into(),
            ));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "warmup of {} epochs exceeds the {} total epochs",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.pretrain_lr >= 0.0) || !(self.finetune_lr >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be non-negative".into()));
        }
        if self.group_sample == 0 || self.select_k == 0 {
            return Err(Error::InvalidArgument("group_sample and select_k must be positive".into()));
        }
        Ok(())
    }

    /// Whether the sampling distribution is refreshed before `epoch` (0-based).
    pub fn updates_at(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs
            && epoch < self.total_epochs
            && (epoch - self.warmup_epochs) % self.stage_epochs == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub tokenizer: Option<usize>,
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Epochs completed when the distribution was refreshed.
    pub epoch: usize,
    pub lr: f64,
    pub scores: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub distribution: SamplingDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub tokenizer_index: usize,
    pub tokenizer_epoch: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Append-only log of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRunRecord {
    pub single_tokenizer: bool,
    pub tokenizer_epochs: Vec<usize>,
    pub initial_distribution: Option<SamplingDistribution>,
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageRecord>,
    pub audits: Vec<StageAudit>,
    pub finetune: Vec<FinetuneRecord>,
    pub chosen: Option<usize>,
}

impl TrainingRunRecord {
    /// Distribution in force during `epoch`.
    pub fn distribution_at(&self, epoch: usize) -> Option<&SamplingDistribution> {
        self.stages
            .iter()
            .rev()
            .find(|s| s.epoch <= epoch)
            .map(|s| &s.distribution)
            .or(self.initial_distribution.as_ref())
    }
}

fn encode(family: &TokenizerFamily, vocab: &Vocabulary, index: usize, pair: &Pair) -> Result<EncodedPair> {
    EncodedPair::new(vocab, &tokenize_pair(family.get(index), index, &pair.history, pair.target)?)
}

fn all_train_pairs(bundles: &[SplitBundle]) -> Result<Vec<&Pair>> {
    let pairs: Vec<&Pair> = bundles.iter().flat_map(|b| &b.train_pairs).collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    Ok(pairs)
}

/// Shared epoch loop: shuffles `pairs`, asks `pick` for each batch's
/// tokenizer indices, and applies one Adam step per batch.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    params: &mut ModelParams,
    adam: &mut Adam,
    family: &TokenizerFamily,
    pairs: &[&Pair],
    batch_size: usize,
    shuffle_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
    lr_at: &dyn Fn(usize) -> f64,
    step: &mut usize,
    pick: &mut dyn FnMut(usize) -> Vec<usize>,
) -> Result<f64> {
    let vocab = params.vocab;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(shuffle_rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let tokenizers = pick(chunk.len());
        let batch: Vec<EncodedPair> = chunk
            .iter()
            .zip(&tokenizers)
            .map(|(&p, &t)| encode(family, &vocab, t, pairs[p]))
            .collect::<Result<_>>()?;
        let seeds: Option<Vec<u64>> =
            (params.config.dropout > 0.0).then(|| batch.iter().map(|_| dropout_rng.next_u64()).collect());
        let loss = train_step(params, &batch, adam, lr_at(*step), seeds.as_deref())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        total += loss * chunk.len() as f64;
        *step += 1;
    }
    Ok(total / pairs.len() as f64)
}

/// Validation pairs tokenized by every family member, in member order.
fn mixed_validation(
    family: &TokenizerFamily,
    vocab: &Vocabulary,
    bundles: &[SplitBundle],
    sample: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EncodedPair>> {
    let chosen: Vec<usize> = if sample == 0 || sample >= bundles.len() {
        (0..bundles.len()).collect()
    } else {
        let mut picked = index::sample(rng, bundles.len(), sample).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut out = Vec::with_capacity(chosen.len() * family.len());
    for i in 0..family.len() {
        for &b in &chosen {
            out.push(encode(family, vocab, i, &bundles[b].validation_pair)?);
        }
    }
    Ok(out)
}

/// Influence-guided pre-training; returns the final parameters and the run log.
pub fn pretrain_curriculum(
    family: &TokenizerFamily,
    bundles: &[SplitBundle],
    model: &ModelConfig,
    config: &CurriculumConfig,
) -> Result<(ModelParams, TrainingRunRecord)> {
    config.validate()?;
    let vocab = Vocabulary::for_family(family)?;
    let mut params = ModelParams::initialize(model.clone(), vocab, &mut seed::rng(seed::derive(config.seed, "model-init")))?;
    let pairs = all_train_pairs(bundles)?;
    let n = family.len();

    let mut record = TrainingRunRecord {
        single_tokenizer: n == 1,
        tokenizer_epochs: family.checkpoints().iter().map(|c| c.epoch).collect(),
        ..TrainingRunRecord::default()
    };
    let mut distribution = SamplingDistribution::uniform(n, config.tau)?;
    record.initial_distribution = Some(distribution.clone());
    let mut ledger = InfluenceLedger::new(n);

    let mut adam = Adam::new(params.parameter_count(), config.weight_decay);
    let mut shuffle_rng = seed::rng(seed::derive(config.seed, "pretrain-shuffle"));
    let mut draw_rng = seed::rng(seed::derive(config.seed, "pretrain-draw"));
    let mut group_rng = seed::rng(seed::derive(config.seed, "influence-sample"));
    let mut dropout_rng = seed::rng(seed::derive(config.seed, "pretrain-dropout"));
    let validation = if n > 1 {
        let mut val_rng = seed::rng(seed::derive(config.seed, "validation-sample"));
        mixed_validation(family, &vocab, bundles, config.validation_sample, &mut val_rng)?
    } else {
        Vec::new()
    };

    let steps_per_epoch = pairs.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.total_epochs;
    let lr_at = |s: usize| cosine_lr(s, total_steps, config.pretrain_lr);
    let mut step = 0;

    for epoch in 0..config.total_epochs {
        if n > 1 && config.updates_at(epoch) {
            let lr = lr_at(step);
            let (val_loss, g_val) = validation_gradient(&params, &validation)?;
            let amount = config.group_sample.min(pairs.len());
            let mut scores = Vec::with_capacity(n);
            let mut sizes = Vec::with_capacity(n);
            for i in 0..n {
                let group: Vec<EncodedPair> = index::sample(&mut group_rng, pairs.len(), amount)
                    .iter()
                    .map(|p| encode(family, &vocab, i, pairs[p]))
                    .collect::<Result<_>>()?;
                let (_, g_group) = validation_gradient(&params, &group)?;
                let gamma = group_gamma(&g_group, AdamMirror::of(&adam))?;
                scores.push(influence_score(lr, &g_val, &gamma)?);
                sizes.push(group.len());
            }
            distribution = update_distribution(&mut ledger, &scores, config.tau)?;
            record.audits.push(StageAudit {
                stage: ledger.stage,
                epoch,
                lr,
                validation_pairs: validation.len(),
                group_sample_sizes: sizes,
                validation_loss: val_loss,
            });
            record.stages.push(StageRecord {
                stage: ledger.stage,
                epoch,
                lr,
                scores,
                cumulative: ledger.cumulative.clone(),
                distribution: distribution.clone(),
            });
        }
        let sampler = distribution.sampler();
        let mut pick = |len: usize| -> Vec<usize> {
            match (n, config.sampling) {
                (1, _) => vec![0; len],
                (_, SamplingGranularity::PerPair) => (0..len).map(|_| sampler.sample(&mut draw_rng)).collect(),
                (_, SamplingGranularity::PerBatch) => vec![sampler.sample(&mut draw_rng); len],
            }
        };
        let mean_loss = run_epoch(
            &mut params,
            &mut adam,
            family,
            &pairs,
            config.batch_size,
            &mut shuffle_rng,
            &mut dropout_rng,
            &lr_at,
            &mut step,
            &mut pick,
        )?;
        record.epochs.push(EpochRecord {
            phase: "pretrain".into(),
            tokenizer: None,
            epoch,
            mean_loss,
        });
    }
    Ok((params, record))
}

/// Trains a copy of `pretrained` on member `index` alone with a fresh
/// optimizer. Every member uses the same shuffling stream.
pub fn finetune_one(
    pretrained: &ModelParams,
    family: &TokenizerFamily,
    index: usize,
    bundles: &[SplitBundle],
    config: &CurriculumConfig,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    config.validate()?;
    if index >= family.len() {
        return Err(Error::InvalidArgument(format!("no tokenizer {index} in a family of {}", family.len())));
    }
    let pairs = all_train_pairs(bundles)?;
    let mut params = pretrained.clone();
    let mut adam = Adam::new(params.parameter_count(), config.weight_decay);
    let mut shuffle_rng = seed::rng(seed::derive(config.seed, "finetune-shuffle"));
    let mut dropout_rng = seed::rng(seed::derive(config.seed, "finetune-dropout"));
    let total_steps = pairs.len().div_ceil(config.batch_size) * config.finetune_epochs;
    let lr_at = |s: usize| cosine_lr(s, total_steps, config.finetune_lr);
    let mut step = 0;
    let mut epochs = Vec::with_capacity(config.finetune_epochs);
    for epoch in 0..config.finetune_epochs {
        let mean_loss = run_epoch(
            &mut params,
            &mut adam,
            family,
            &pairs,
            config.batch_size,
            &mut shuffle_rng,
            &mut dropout_rng,
            &lr_at,
            &mut step,
            &mut |len| vec![index; len],
        )?;
        epochs.push(EpochRecord {
            phase: "finetune".into(),
            tokenizer: Some(index),
            epoch,
            mean_loss,
        });
    }
    Ok((params, epochs))
}

/// Validation Recall and NDCG at `config.select_k` of `params` under member `index`.
pub fn validation_metrics(
    params: &ModelParams,
    family: &TokenizerFamily,
    index: usize,
    bundles: &[SplitBundle],
    config: &CurriculumConfig,
    eval: &EvalConfig,
) -> Result<FinetuneRecord> {
    let pairs: Vec<Pair> = bundles.iter().map(|b| b.validation_pair.clone()).collect();
    let eval = EvalConfig {
        top_k: vec![config.select_k],
        beam_width: eval.beam_width.max(config.select_k),
        ..eval.clone()
    };
    let report = evaluate_full(params, family.get(index), &pairs, None, &eval)?;
    Ok(FinetuneRecord {
        tokenizer_index: index,
        tokenizer_epoch: family.get(index).epoch,
        recall: report.recall[0],
        ndcg: report.ndcg[0],
    })
}

/// Index of the best record: highest recall, then highest NDCG, then lowest index.
pub fn select_best(records: &[FinetuneRecord]) -> Option<usize> {
    let mut best: Option<&FinetuneRecord> = None;
    for r in records {
        let better = match best {
            None => true,
            Some(b) => r.recall > b.recall || (r.recall == b.recall && r.ndcg > b.ndcg),
        };
        if better {
            best = Some(r);
        }
    }
    best.map(|b| b.tokenizer_index)
}

/// Fine-tunes one copy per member, scores each on validation, and keeps the best.
pub fn finetune_and_select(
    pretrained: &ModelParams,
    family: &TokenizerFamily,
    bundles: &[SplitBundle],
    config: &CurriculumConfig,
    eval: &EvalConfig,
    record: &mut TrainingRunRecord,
) -> Result<(ModelParams, usize)> {
    let mut models = Vec::with_capacity(family.len());
    for i in 0..family.len() {
        let (params, epochs) = finetune_one(pretrained, family, i, bundles, config)?;
        record.epochs.extend(epochs);
        record.finetune.push(validation_metrics(&params, family, i, bundles, config, eval)?);
        models.push(params);
    }
    let start = record.finetune.len() - family.len();
    let chosen = select_best(&record.finetune[start..]).expect("family is non-empty");
    record.chosen = Some(chosen);
    Ok((models.swap_remove(chosen), chosen))
}
