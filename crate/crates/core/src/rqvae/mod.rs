//! Residual-quantization autoencoder used as the item tokenizer.
//!
//! An MLP encoder maps an item embedding `z` to a latent `r`, which is
//! quantized coarse-to-fine by `H` codebooks: at level `h` the nearest
//! codeword to the running residual is picked and subtracted. The decoder
//! reconstructs `z` from the sum of the picked codewords.
//!
//! Training minimizes `‖z − ẑ‖² + Σ_h ‖sg[r_h] − e_h‖² + β‖r_h − sg[e_h]‖²`.
//! Reconstruction gradients reach the encoder through a straight-through
//! substitution of the quantized latent; codebooks are not trained by
//! gradient but follow exponential moving averages of their assignments.

mod checkpoint;
mod codebook;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{TokenizerCheckpoint, TOKENIZER_MAGIC, TOKENIZER_VERSION};
pub use codebook::{Codebook, EMA_COUNT_FLOOR};

use crate::embeddings::SemanticEmbeddingMatrix;
use crate::error::{Error, Result};
use crate::family::Identifier;
use crate::nn::{self, Activation};
use crate::optim::Adagrad;
use crate::seed;
use crate::tape::{Graph, Mat, Var};

/// Commitment weight β.
pub const DEFAULT_BETA: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqVaeConfig {
    /// Number of semantic levels `H`.
    pub levels: usize,
    /// Codewords per level `K`.
    pub codebook_size: usize,
    pub codebook_dim: usize,
    /// Hidden layer widths of the encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub ema_decay: f64,
    /// Epochs without assignments before a codeword is reseeded.
    pub dead_after: usize,
    /// Size of the collision index space; 0 means "same as `codebook_size`".
    pub collision_capacity: usize,
    pub activation: Activation,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 16,
            codebook_dim: 16,
            hidden: vec![64, 32],
            beta: DEFAULT_BETA,
            ema_decay: 0.99,
            dead_after: 3,
            collision_capacity: 0,
            activation: Activation::Relu,
        }
    }
}

impl RqVaeConfig {
    /// Full-scale setting: 3 × 256 codebooks of dimension 128 behind a
    /// [2048, 1024, 512, 256] encoder.
    pub fn full_scale() -> Self {
        Self {
            codebook_size: 256,
            codebook_dim: 128,
            hidden: vec![2048, 1024, 512, 256],
            ..Self::default()
        }
    }

    pub fn collision_capacity(&self) -> usize {
        if self.collision_capacity == 0 {
            self.codebook_size
        } else {
            self.collision_capacity
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.codebook_size < 2 || self.codebook_dim == 0 {
            return Err(Error::InvalidArgument(
                "rqvae needs levels ≥ 1, codebook_size ≥ 2, codebook_dim ≥ 1".into(),
            ));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidArgument("rqvae beta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument("rqvae ema_decay must lie in [0, 1)".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.codebook_dim);
        dims
    }

    fn decoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = self.encoder_dims(input_dim);
        dims.reverse();
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RqVaeParams {
    pub config: RqVaeConfig,
    pub input_dim: usize,
    /// Encoder layers then decoder layers, each as `(weight, bias)`.
    pub tensors: Vec<Mat>,
    pub codebooks: Vec<Codebook>,
}

/// Tokens and residuals of one quantized latent.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationOutcome {
    pub tokens: Vec<usize>,
    /// `r_1 … r_{H+1}`; `r_1` is the encoder output.
    pub residuals: Vec<Array1<f64>>,
    /// Sum of the selected codewords.
    pub quantized: Array1<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub rq: f64,
    pub total: f64,
}

impl RqVaeParams {
    /// Assembles parameters from explicit parts, validating every shape.
    pub fn from_parts(
        config: RqVaeConfig,
        input_dim: usize,
        tensors: Vec<Mat>,
        codebooks: Vec<Codebook>,
    ) -> Result<Self> {
        config.validate()?;
        let expected: Vec<(usize, usize)> = config
            .encoder_dims(input_dim)
            .windows(2)
            .chain(config.decoder_dims(input_dim).windows(2))
            .flat_map(|w| [(w[0], w[1]), (1, w[1])])
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::DimensionMismatch {
                expected: expected.len(),
                got: tensors.len(),
            });
        }
        for (t, shape) in tensors.iter().zip(&expected) {
            if t.dim() != *shape {
                return Err(Error::Format(format!(
                    "tensor shape {:?}, expected {shape:?}",
                    t.dim()
                )));
            }
        }
        if codebooks.len() != config.levels
            || codebooks
                .iter()
                .any(|c| c.size() != config.codebook_size || c.dim() != config.codebook_dim)
        {
            return Err(Error::InvalidArgument(
                "codebooks do not match the configured levels/size/dim".into(),
            ));
        }
        Ok(Self {
            config,
            input_dim,
            tensors,
            codebooks,
        })
    }

    /// Random encoder/decoder weights and codebooks seeded from distinct
    /// embedding rows: level `h` takes the level-`h` residuals of `K`
    /// randomly chosen items.
    pub fn initialize(
        config: RqVaeConfig,
        data: &SemanticEmbeddingMatrix,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let input_dim = data.dim();
        if data.len() < config.codebook_size {
            return Err(Error::InvalidArgument(format!(
                "{} items cannot seed {} distinct codewords",
                data.len(),
                config.codebook_size
            )));
        }
        let mut tensors = nn::init_mlp(rng, &config.encoder_dims(input_dim));
        tensors.extend(nn::init_mlp(rng, &config.decoder_dims(input_dim)));
        let mut params = Self {
            input_dim,
            tensors,
            codebooks: Vec::with_capacity(config.levels),
            config,
        };
        let mut residual = params.encode_rows(data.rows().view())?;
        for level in 0..params.config.levels {
            let chosen = index::sample(rng, data.len(), params.config.codebook_size);
            let mut words = Array2::zeros((params.config.codebook_size, params.config.codebook_dim));
            for (k, i) in chosen.iter().enumerate() {
                words.row_mut(k).assign(&residual.row(i));
            }
            let book = Codebook::new(level + 1, words)?;
            for mut row in residual.rows_mut() {
                let c = book.nearest(row.view());
                row -= &book.codewords.row(c);
            }
            params.codebooks.push(book);
        }
        Ok(params)
    }

    fn encoder_len(&self) -> usize {
        2 * (self.config.hidden.len() + 1)
    }

    pub fn encoder_tensors(&self) -> &[Mat] {
        &self.tensors[..self.encoder_len()]
    }

    pub fn decoder_tensors(&self) -> &[Mat] {
        &self.tensors[self.encoder_len()..]
    }

    pub fn parameter_count(&self) -> usize {
        nn::parameter_count(&self.tensors)
    }

    /// Encoder forward pass for a single embedding.
    pub fn encode(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        let rows = self.encode_rows(z.insert_axis(Axis(0)))?;
        Ok(rows.row(0).to_owned())
    }

    pub fn encode_rows(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: z.ncols(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(z.to_owned());
        let params: Vec<Var> = self
            .encoder_tensors()
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        let r = nn::mlp_forward(&mut g, x, &params, self.config.activation);
        Ok(g.value(r).clone())
    }

    pub fn decode_rows(&self, r: ArrayView2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let x = g.constant(r.to_owned());
        let params: Vec<Var> = self
            .decoder_tensors()
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        let out = nn::mlp_forward(&mut g, x, &params, self.config.activation);
        g.value(out).clone()
    }

    /// Straight-through loss of a batch under fixed token assignments, with
    /// gradients for every encoder and decoder scalar (flattened in tensor
    /// order). Losses are means over rows.
    pub fn loss_with_tokens(
        &self,
        z: ArrayView2<f64>,
        tokens: &[Vec<usize>],
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let batch = z.nrows();
        if tokens.len() != batch {
            return Err(Error::DimensionMismatch {
                expected: batch,
                got: tokens.len(),
            });
        }
        let mut g = Graph::new();
        let x = g.constant(z.to_owned());
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        let (enc, dec) = vars.split_at(self.encoder_len());
        let r = nn::mlp_forward(&mut g, x, enc, self.config.activation);
        let latent = g.value(r).clone();

        // cumulative codeword sums: prefix[h] = Σ_{j ≤ h} e^j_{c_j}
        let levels = self.config.levels;
        let mut prefix = vec![Array2::<f64>::zeros(latent.dim()); levels];
        for (row, toks) in tokens.iter().enumerate() {
            let mut acc = Array1::<f64>::zeros(latent.ncols());
            for (h, &c) in toks.iter().enumerate().take(levels) {
                acc += &self.codebooks[h].codewords.row(c);
                prefix[h].row_mut(row).assign(&acc);
            }
        }
        let quantized = prefix[levels - 1].clone();
        let delta = g.constant(&quantized - &latent);
        let dec_in = g.add(r, delta);
        let recon_out = nn::mlp_forward(&mut g, dec_in, dec, self.config.activation);
        let err = g.sub(recon_out, x);
        let recon_sum = g.sum_squares(err);

        let mut commit_sum = 0.0;
        let mut commit_terms = Vec::with_capacity(levels);
        for target in prefix {
            let t = g.constant(target);
            let diff = g.sub(r, t);
            let sq = g.sum_squares(diff);
            commit_sum += g.scalar(sq);
            commit_terms.push(sq);
        }
        let mut objective = recon_sum;
        for term in commit_terms {
            let weighted = g.scale(term, self.config.beta);
            objective = g.add(objective, weighted);
        }
        let n = batch as f64;
        let objective = g.scale(objective, 1.0 / n);

        let recon = g.scalar(recon_sum) / n;
        // the codebook term has the same value as the commitment distance
        let rq = (1.0 + self.config.beta) * commit_sum / n;
        let loss = LossBreakdown {
            recon,
            rq,
            total: recon + rq,
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("rqvae loss {loss:?}")));
        }
        let mut grads = g.backward(objective);
        let mut flat = Vec::with_capacity(self.parameter_count());
        for (v, t) in vars.iter().zip(&self.tensors) {
            flat.extend(grads.take_or_zeros(*v, t.dim()).iter().copied());
        }
        Ok((loss, flat))
    }
}

/// Residual quantization of one latent through `codebooks` in order.
pub fn quantize(codebooks: &[Codebook], r: ArrayView1<f64>) -> Result<QuantizationOutcome> {
    let mut residuals = Vec::with_capacity(codebooks.len() + 1);
    let mut tokens = Vec::with_capacity(codebooks.len());
    let mut quantized = Array1::zeros(r.len());
    let mut current = r.to_owned();
    for book in codebooks {
        if book.dim() != r.len() {
            return Err(Error::DimensionMismatch {
                expected: book.dim(),
                got: r.len(),
            });
        }
        let c = book.nearest(current.view());
        let word = book.codewords.row(c);
        let next = &current - &word;
        quantized += &word;
        tokens.push(c);
        residuals.push(current);
        current = next;
    }
    residuals.push(current);
    Ok(QuantizationOutcome {
        tokens,
        residuals,
        quantized,
    })
}

/// Straight-through losses and gradients for a single item.
pub fn rq_losses(
    params: &RqVaeParams,
    z: ArrayView1<f64>,
    outcome: &QuantizationOutcome,
) -> Result<(LossBreakdown, Vec<f64>)> {
    params.loss_with_tokens(z.insert_axis(Axis(0)), std::slice::from_ref(&outcome.tokens))
}

/// Mutable tokenizer training state.
pub struct TokenizerTrainer {
    pub params: RqVaeParams,
    pub optimizer: Adagrad,
    pub batch_size: usize,
    pub epochs_done: usize,
    rng: ChaCha8Rng,
}

impl TokenizerTrainer {
    pub fn new(
        config: RqVaeConfig,
        data: &SemanticEmbeddingMatrix,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut rng = seed::rng(seed);
        let params = RqVaeParams::initialize(config, data, &mut rng)?;
        Ok(Self::from_params(params, batch_size, rng))
    }

    pub fn from_params(params: RqVaeParams, batch_size: usize, rng: ChaCha8Rng) -> Self {
        let optimizer = Adagrad::new(params.parameter_count());
        Self {
            params,
            optimizer,
            batch_size,
            epochs_done: 0,
            rng,
        }
    }

    /// One shuffled pass: Adagrad on encoder/decoder, EMA on codebooks after
    /// every batch, dead-codeword reseeding at the end. Returns mean losses.
    pub fn train_epoch(&mut self, data: &SemanticEmbeddingMatrix, lr: f64) -> Result<LossBreakdown> {
        let rows = data.rows();
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training embeddings".into()));
        }
        let mut order: Vec<usize> = (0..rows.nrows()).collect();
        order.shuffle(&mut self.rng);

        let levels = self.params.config.levels;
        let mut pools: Vec<Vec<Array1<f64>>> = vec![Vec::new(); levels];
        let mut totals = LossBreakdown::default();
        for chunk in order.chunks(self.batch_size) {
            let batch = rows.select(Axis(0), chunk);
            let latent = self.params.encode_rows(batch.view())?;
            let outcomes: Vec<QuantizationOutcome> = latent
                .rows()
                .into_iter()
                .map(|r| quantize(&self.params.codebooks, r))
                .collect::<Result<_>>()?;
            let tokens: Vec<Vec<usize>> = outcomes.iter().map(|o| o.tokens.clone()).collect();
            let (loss, grad) = self.params.loss_with_tokens(batch.view(), &tokens)?;
            let weight = chunk.len() as f64;
            totals.recon += loss.recon * weight;
            totals.rq += loss.rq * weight;
            totals.total += loss.total * weight;

            self.optimizer.step(&mut self.params.tensors, &grad, lr)?;

            let gamma = self.params.config.ema_decay;
            for (h, pool) in pools.iter_mut().enumerate() {
                let assigned: Vec<usize> = outcomes.iter().map(|o| o.tokens[h]).collect();
                let mut inputs = Array2::zeros((outcomes.len(), self.params.config.codebook_dim));
                for (i, o) in outcomes.iter().enumerate() {
                    inputs.row_mut(i).assign(&o.residuals[h]);
                    pool.push(o.residuals[h].clone());
                }
                self.params.codebooks[h].ema_update(&assigned, inputs.view(), gamma)?;
            }
        }
        for (book, pool) in self.params.codebooks.iter_mut().zip(&pools) {
            let mut stacked = Array2::zeros((pool.len(), book.dim()));
            for (i, r) in pool.iter().enumerate() {
                stacked.row_mut(i).assign(r);
            }
            book.end_epoch(self.params.config.dead_after, stacked.view(), &mut self.rng);
        }
        self.epochs_done += 1;
        let n = rows.nrows() as f64;
        Ok(LossBreakdown {
            recon: totals.recon / n,
            rq: totals.rq / n,
            total: totals.total / n,
        })
    }
}

/// Semantic tokens for every item plus a collision token: items sharing all
/// `H` semantic tokens are ranked by dense index (ascending item id).
pub fn assign_identifiers(
    params: &RqVaeParams,
    data: &SemanticEmbeddingMatrix,
) -> Result<Vec<Identifier>> {
    let latent = params.encode_rows(data.rows().view())?;
    let semantic: Vec<Vec<usize>> = latent
        .rows()
        .into_iter()
        .map(|r| quantize(&params.codebooks, r).map(|o| o.tokens))
        .collect::<Result<_>>()?;
    identifiers_from_semantic(&semantic, params.config.collision_capacity())
}

pub(crate) fn identifiers_from_semantic(
    semantic: &[Vec<usize>],
    capacity: usize,
) -> Result<Vec<Identifier>> {
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for (item, toks) in semantic.iter().enumerate() {
        groups.entry(toks.as_slice()).or_default().push(item);
    }
    let mut collision = vec![0usize; semantic.len()];
    for members in groups.values() {
        if members.len() > capacity {
            return Err(Error::CollisionOverflow {
                size: members.len(),
                capacity,
            });
        }
        for (rank, &item) in members.iter().enumerate() {
            collision[item] = rank;
        }
    }
    Ok(semantic
        .iter()
        .zip(collision)
        .map(|(toks, c)| {
            let mut all: Vec<u32> = toks.iter().map(|&t| t as u32).collect();
            all.push(c as u32);
            Identifier::new(all)
        })
        .collect())
}

/// Freezes the current codebooks and identifier map as the tokenizer of `epoch`.
pub fn snapshot_checkpoint(
    params: &RqVaeParams,
    data: &SemanticEmbeddingMatrix,
    epoch: usize,
) -> Result<TokenizerCheckpoint> {
    if epoch == 0 {
        return Err(Error::InvalidArgument("checkpoint epochs start at 1".into()));
    }
    let identifiers = assign_identifiers(params, data)?;
    TokenizerCheckpoint::new(
        epoch,
        params.config.levels,
        params.config.codebook_size,
        params.config.collision_capacity(),
        params
            .codebooks
            .iter()
            .map(|c| c.codewords.clone())
            .collect(),
        identifiers,
    )
}

#[cfg(test)]
mod tests;
