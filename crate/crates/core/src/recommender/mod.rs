//! Encoder-decoder transformer that reads a tokenized interaction history and
//! generates the identifier of the next item one token at a time.
//!
//! All tokenizers of a family share one vocabulary: token identity is
//! `(level, code)`, so the same model can be trained on a mixture of their
//! token sequences. Blocks are pre-norm; attention has no biases; token
//! embeddings are shared by the encoder and decoder inputs while the output
//! projection is a separate matrix.

mod beam;
mod checkpoint;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use beam::{beam_search, identifiers_to_items, BeamHypothesis, DecodeMode};
pub use checkpoint::{MODEL_MAGIC, MODEL_VERSION};

use crate::error::{Error, Result};
use crate::family::{Identifier, TokenSequencePair, TokenizerFamily};
use crate::nn::{self, Activation};
use crate::optim::Adam;
use crate::tape::{Graph, Mat, Var};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
const SPECIALS: u32 = 2;

/// Token space: `PAD`, `BOS`, then one block of `width` ids per level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Semantic levels `H`; level `H` holds the collision token.
    pub levels: usize,
    pub codebook_size: usize,
    pub collision_capacity: usize,
}

impl Vocabulary {
    pub fn new(levels: usize, codebook_size: usize, collision_capacity: usize) -> Result<Self> {
        if levels == 0 || codebook_size == 0 || collision_capacity == 0 {
            return Err(Error::InvalidArgument("empty vocabulary".into()));
        }
        Ok(Self {
            levels,
            codebook_size,
            collision_capacity,
        })
    }

    pub fn for_family(family: &TokenizerFamily) -> Result<Self> {
        Self::new(family.levels(), family.codebook_size(), family.collision_capacity())
    }

    /// Identifier length `H + 1`.
    pub fn id_len(&self) -> usize {
        self.levels + 1
    }

    pub fn width(&self) -> usize {
        self.codebook_size.max(self.collision_capacity)
    }

    pub fn size(&self) -> usize {
        SPECIALS as usize + self.id_len() * self.width()
    }

    /// Number of valid codes at `level`.
    pub fn codes_at(&self, level: usize) -> usize {
        if level < self.levels {
            self.codebook_size
        } else {
            self.collision_capacity
        }
    }

    pub fn token_id(&self, level: usize, code: u32) -> Result<u32> {
        if level > self.levels || code as usize >= self.codes_at(level) {
            return Err(Error::TokenOutOfRange {
                token: code as usize,
                vocab: self.codes_at(level.min(self.levels)),
            });
        }
        Ok(SPECIALS + (level * self.width()) as u32 + code)
    }

    /// `(level, code)` of a token, or `None` for specials and unused slots.
    pub fn decode(&self, token: u32) -> Option<(usize, u32)> {
        let t = token.checked_sub(SPECIALS)? as usize;
        let (level, code) = (t / self.width(), t % self.width());
        (level <= self.levels && code < self.codes_at(level)).then_some((level, code as u32))
    }

    /// Maps a flattened run of identifiers to token ids; position `p` is at
    /// level `p mod (H+1)`.
    pub fn encode_codes(&self, codes: &[u32]) -> Result<Vec<u32>> {
        codes
            .iter()
            .enumerate()
            .map(|(p, &c)| self.token_id(p % self.id_len(), c))
            .collect()
    }

    pub fn encode_identifier(&self, id: &Identifier) -> Result<Vec<u32>> {
        if id.len() != self.id_len() {
            return Err(Error::DimensionMismatch {
                expected: self.id_len(),
                got: id.len(),
            });
        }
        self.encode_codes(id.tokens())
    }

    /// Identifier spelled by a full-length token list, if every token sits at
    /// its own level.
    pub fn to_identifier(&self, tokens: &[u32]) -> Option<Identifier> {
        if tokens.len() != self.id_len() {
            return None;
        }
        let mut codes = Vec::with_capacity(tokens.len());
        for (p, &t) in tokens.iter().enumerate() {
            match self.decode(t) {
                Some((level, code)) if level == p => codes.push(code),
                _ => return None,
            }
        }
        Some(Identifier::new(codes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub heads: usize,
    /// Blocks in the encoder and in the decoder.
    pub layers: usize,
    pub dropout: f64,
    /// Longest encoder input in tokens.
    pub max_positions: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_inner: 64,
            heads: 2,
            layers: 2,
            dropout: 0.0,
            max_positions: 80,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    /// Full-scale profile: d 128, inner 512, 4 heads.
    pub fn full_scale() -> Self {
        Self {
            d_model: 128,
            d_inner: 512,
            heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_inner == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument("model sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        if self.max_positions == 0 {
            return Err(Error::InvalidArgument("max_positions must be positive".into()));
        }
        Ok(())
    }
}

const ENC_BLOCK: usize = 12;
const DEC_BLOCK: usize = 18;

/// Names and shapes of every parameter tensor in canonical order.
pub fn layout(config: &ModelConfig, vocab: &Vocabulary) -> Vec<(String, (usize, usize))> {
    let (d, f, v) = (config.d_model, config.d_inner, vocab.size());
    let mut out = vec![
        ("token_embedding".to_string(), (v, d)),
        ("encoder_position".to_string(), (config.max_positions, d)),
        ("decoder_position".to_string(), (vocab.id_len(), d)),
    ];
    let mut push = |prefix: &str, name: &str, shape| out.push((format!("{prefix}.{name}"), shape));
    for l in 0..config.layers {
        let p = format!("encoder.{l}");
        for (name, shape) in [
            ("ln_attn.gain", (1, d)),
            ("ln_attn.bias", (1, d)),
            ("attn.q", (d, d)),
            ("attn.k", (d, d)),
            ("attn.v", (d, d)),
            ("attn.o", (d, d)),
            ("ln_ffn.gain", (1, d)),
            ("ln_ffn.bias", (1, d)),
            ("ffn.w1", (d, f)),
            ("ffn.b1", (1, f)),
            ("ffn.w2", (f, d)),
            ("ffn.b2", (1, d)),
        ] {
            push(&p, name, shape);
        }
    }
    push("encoder", "ln_final.gain", (1, d));
    push("encoder", "ln_final.bias", (1, d));
    for l in 0..config.layers {
        let p = format!("decoder.{l}");
        for (name, shape) in [
            ("ln_self.gain", (1, d)),
            ("ln_self.bias", (1, d)),
            ("self.q", (d, d)),
            ("self.k", (d, d)),
            ("self.v", (d, d)),
            ("self.o", (d, d)),
            ("ln_cross.gain", (1, d)),
            ("ln_cross.bias", (1, d)),
            ("cross.q", (d, d)),
            ("cross.k", (d, d)),
            ("cross.v", (d, d)),
            ("cross.o", (d, d)),
            ("ln_ffn.gain", (1, d)),
            ("ln_ffn.bias", (1, d)),
            ("ffn.w1", (d, f)),
            ("ffn.b1", (1, f)),
            ("ffn.w2", (f, d)),
            ("ffn.b2", (1, d)),
        ] {
            push(&p, name, shape);
        }
    }
    push("decoder", "ln_final.gain", (1, d));
    push("decoder", "ln_final.bias", (1, d));
    out.push(("output.weight".to_string(), (d, v)));
    out.push(("output.bias".to_string(), (1, v)));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// Tensors in [`layout`] order.
    pub tensors: Vec<Mat>,
}

impl ModelParams {
    /// Glorot weights, unit layer-norm gains, zero biases, and small normal
    /// embeddings.
    pub fn initialize(config: ModelConfig, vocab: Vocabulary, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let tensors = layout(&config, &vocab)
            .into_iter()
            .map(|(name, (r, c))| {
                if name.ends_with(".gain") {
                    Mat::ones((r, c))
                } else if r == 1 {
                    Mat::zeros((r, c))
                } else if name.contains("embedding") || name.contains("position") {
                    Mat::from_shape_simple_fn((r, c), || 0.1 * (rng.random::<f64>() * 2.0 - 1.0))
                } else {
                    nn::glorot(rng, r, c)
                }
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            tensors,
        })
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, tensors: Vec<Mat>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config, &vocab);
        if expected.len() != tensors.len() {
            return Err(Error::DimensionMismatch {
                expected: expected.len(),
                got: tensors.len(),
            });
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.dim() != *shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.dim()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
        }
        Ok(Self {
            config,
            vocab,
            tensors,
        })
    }

    pub fn parameter_count(&self) -> usize {
        nn::parameter_count(&self.tensors)
    }

    pub fn flatten(&self) -> Vec<f64> {
        nn::flatten(&self.tensors)
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        nn::unflatten_into(&mut self.tensors, flat);
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        layout(&self.config, &self.vocab)
            .iter()
            .position(|(n, _)| n == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let vocab = self.vocab.size();
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&t) => Err(Error::TokenOutOfRange {
                token: t as usize,
                vocab,
            }),
            None => Ok(()),
        }
    }

    fn check_encoder_input(&self, x: &[u32]) -> Result<()> {
        self.check_tokens(x)?;
        if x.iter().all(|&t| t == PAD) {
            return Err(Error::InvalidArgument("encoder input has no tokens".into()));
        }
        if x.len() > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "encoder input of {} tokens exceeds max_positions {}",
                x.len(),
                self.config.max_positions
            )));
        }
        Ok(())
    }

    /// Logits for every decoder position (`|y_prefix| × |vocab|`).
    /// `y_prefix` is the decoder input and must start with `BOS`.
    pub fn forward_logits(&self, x: &[u32], y_prefix: &[u32]) -> Result<Mat> {
        self.check_encoder_input(x)?;
        self.check_decoder_input(y_prefix)?;
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let mut drop = Dropout::off();
        let memory = encode(&mut g, &vars, &self.config, x, &mut drop);
        let logits = decode(&mut g, &vars, &self.config, memory, x, &[y_prefix], &mut drop);
        Ok(g.value(logits).clone())
    }

    fn check_decoder_input(&self, y: &[u32]) -> Result<()> {
        self.check_tokens(y)?;
        if y.first() != Some(&BOS) || y.len() > self.vocab.id_len() {
            return Err(Error::InvalidArgument(format!(
                "decoder input must start with BOS and hold at most {} tokens",
                self.vocab.id_len()
            )));
        }
        Ok(())
    }

    /// Encoder output for `x`, reusable across decoding steps.
    pub fn encode_memory(&self, x: &[u32]) -> Result<Mat> {
        self.check_encoder_input(x)?;
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let memory = encode(&mut g, &vars, &self.config, x, &mut Dropout::off());
        Ok(g.value(memory).clone())
    }

    /// Logits at the last position of each decoder row, all rows sharing one
    /// encoder memory. Rows must have equal length.
    pub(crate) fn last_logits(&self, memory: &Mat, x: &[u32], rows: &[&[u32]]) -> Mat {
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let mem = g.constant(memory.clone());
        let logits = decode(&mut g, &vars, &self.config, mem, x, rows, &mut Dropout::off());
        let t = rows[0].len();
        let all = g.value(logits);
        let mut out = Mat::zeros((rows.len(), all.ncols()));
        for i in 0..rows.len() {
            out.row_mut(i).assign(&all.row(i * t + t - 1));
        }
        out
    }

    fn constants(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Teacher-forced NLL of identifier tokens `y` (vocab ids, length `H+1`)
    /// given encoder tokens `x`: `−Σ_h log P(y_h | x, y_<h)`.
    pub fn sequence_nll(&self, x: &[u32], y: &[u32]) -> Result<(f64, Vec<f64>)> {
        self.nll_inner(x, y, None)
    }

    /// Loss only.
    pub fn sequence_loss(&self, x: &[u32], y: &[u32]) -> Result<f64> {
        self.check_pair(x, y)?;
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let loss = nll_graph(&mut g, &vars, &self.config, x, y, &mut Dropout::off());
        Ok(g.scalar(loss))
    }

    fn check_pair(&self, x: &[u32], y: &[u32]) -> Result<()> {
        self.check_encoder_input(x)?;
        self.check_tokens(y)?;
        if y.len() != self.vocab.id_len() {
            return Err(Error::DimensionMismatch {
                expected: self.vocab.id_len(),
                got: y.len(),
            });
        }
        Ok(())
    }

    fn nll_inner(&self, x: &[u32], y: &[u32], rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<f64>)> {
        self.check_pair(x, y)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        let mut drop = match rng {
            Some(rng) if self.config.dropout > 0.0 => Dropout::on(self.config.dropout, rng),
            _ => Dropout::off(),
        };
        let loss = nll_graph(&mut g, &vars, &self.config, x, y, &mut drop);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("sequence loss {value}")));
        }
        let mut grads = g.backward(loss);
        let mut flat = Vec::with_capacity(self.parameter_count());
        for (v, t) in vars.iter().zip(&self.tensors) {
            flat.extend(grads.take_or_zeros(*v, t.dim()).iter().copied());
        }
        Ok((value, flat))
    }
}

/// A training pair in vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

impl EncodedPair {
    pub fn new(vocab: &Vocabulary, pair: &TokenSequencePair) -> Result<Self> {
        Ok(Self {
            x: vocab.encode_codes(&pair.x)?,
            y: vocab.encode_identifier(&pair.y)?,
        })
    }
}

/// Mean loss and mean gradient of `pairs`. Per-pair work runs in parallel;
/// the sum is taken in pair order so the result does not depend on the
/// number of workers. `seeds` enables dropout with one seed per pair.
pub fn batch_gradient(
    params: &ModelParams,
    pairs: &[EncodedPair],
    seeds: Option<&[u64]>,
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_pair: Vec<(f64, Vec<f64>)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = seeds.map(|s| crate::seed::rng(s[i]));
            params.nll_inner(&p.x, &p.y, rng.as_mut())
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = vec![0.0; params.parameter_count()];
    for (loss, g) in &per_pair {
        total += loss;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let n = pairs.len() as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((total / n, grad))
}

/// Mean loss of `pairs` without gradients.
pub fn batch_loss(params: &ModelParams, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|p| params.sequence_loss(&p.x, &p.y))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / pairs.len() as f64)
}

/// One Adam step on the mean batch loss; returns that loss.
pub fn train_step(
    params: &mut ModelParams,
    pairs: &[EncodedPair],
    adam: &mut Adam,
    lr: f64,
    dropout_seeds: Option<&[u64]>,
) -> Result<f64> {
    if lr < 0.0 {
        return Err(Error::InvalidArgument(format!("negative learning rate {lr}")));
    }
    let (loss, grad) = batch_gradient(params, pairs, dropout_seeds)?;
    if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {i}")));
    }
    adam.step(&mut params.tensors, &grad, lr)?;
    Ok(loss)
}

struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    fn on(p: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        let keep = 1.0 - self.p;
        let (r, c) = g.value(x).dim();
        let mask = Mat::from_shape_simple_fn((r, c), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        g.mul_const(x, mask)
    }
}

fn to_usize(tokens: &[u32]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

fn attention(
    g: &mut Graph,
    w: &[Var],
    heads: usize,
    query: Var,
    memory: Var,
    allowed: &Array2<bool>,
) -> Var {
    let q = g.matmul(query, w[0]);
    let k = g.matmul(memory, w[1]);
    let v = g.matmul(memory, w[2]);
    let d = g.value(q).ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let weights = g.masked_softmax(scores, allowed);
        outs.push(g.matmul(weights, vh));
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    g.matmul(joined, w[3])
}

fn pad_key_mask(rows: usize, x: &[u32]) -> Array2<bool> {
    Array2::from_shape_fn((rows, x.len()), |(_, j)| x[j] != PAD)
}

fn encode(g: &mut Graph, vars: &[Var], config: &ModelConfig, x: &[u32], drop: &mut Dropout) -> Var {
    let n = x.len();
    let emb = g.gather_rows(vars[0], &to_usize(x));
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.gather_rows(vars[1], &positions);
    let mut h = g.add(emb, pos);
    h = drop.apply(g, h);
    let mask = pad_key_mask(n, x);
    for l in 0..config.layers {
        let b = &vars[3 + l * ENC_BLOCK..3 + (l + 1) * ENC_BLOCK];
        let normed = g.layer_norm(h, b[0], b[1]);
        let att = attention(g, &b[2..6], config.heads, normed, normed, &mask);
        let att = drop.apply(g, att);
        h = g.add(h, att);
        let normed = g.layer_norm(h, b[6], b[7]);
        let ff = nn::mlp_forward(g, normed, &b[8..12], config.activation);
        let ff = drop.apply(g, ff);
        h = g.add(h, ff);
    }
    let f = 3 + config.layers * ENC_BLOCK;
    g.layer_norm(h, vars[f], vars[f + 1])
}

/// Decoder over several equal-length rows stacked vertically; each row only
/// attends within itself, causally.
fn decode(
    g: &mut Graph,
    vars: &[Var],
    config: &ModelConfig,
    memory: Var,
    x: &[u32],
    rows: &[&[u32]],
    drop: &mut Dropout,
) -> Var {
    let t = rows[0].len();
    let total = rows.len() * t;
    let ids: Vec<usize> = rows.iter().flat_map(|r| to_usize(r)).collect();
    let positions: Vec<usize> = (0..total).map(|i| i % t).collect();
    let emb = g.gather_rows(vars[0], &ids);
    let pos = g.gather_rows(vars[2], &positions);
    let mut h = g.add(emb, pos);
    h = drop.apply(g, h);
    let causal = Array2::from_shape_fn((total, total), |(i, j)| i / t == j / t && j % t <= i % t);
    let cross = pad_key_mask(total, x);
    let base = 5 + config.layers * ENC_BLOCK;
    for l in 0..config.layers {
        let b = &vars[base + l * DEC_BLOCK..base + (l + 1) * DEC_BLOCK];
        let normed = g.layer_norm(h, b[0], b[1]);
        let att = attention(g, &b[2..6], config.heads, normed, normed, &causal);
        let att = drop.apply(g, att);
        h = g.add(h, att);
        let normed = g.layer_norm(h, b[6], b[7]);
        let att = attention(g, &b[8..12], config.heads, normed, memory, &cross);
        let att = drop.apply(g, att);
        h = g.add(h, att);
        let normed = g.layer_norm(h, b[12], b[13]);
        let ff = nn::mlp_forward(g, normed, &b[14..18], config.activation);
        let ff = drop.apply(g, ff);
        h = g.add(h, ff);
    }
    let f = base + config.layers * DEC_BLOCK;
    let h = g.layer_norm(h, vars[f], vars[f + 1]);
    let logits = g.matmul(h, vars[f + 2]);
    g.add_row(logits, vars[f + 3])
}

fn nll_graph(
    g: &mut Graph,
    vars: &[Var],
    config: &ModelConfig,
    x: &[u32],
    y: &[u32],
    drop: &mut Dropout,
) -> Var {
    let mut dec_in = Vec::with_capacity(y.len());
    dec_in.push(BOS);
    dec_in.extend_from_slice(&y[..y.len() - 1]);
    let memory = encode(g, vars, config, x, drop);
    let logits = decode(g, vars, config, memory, x, &[&dec_in], drop);
    g.cross_entropy(logits, &to_usize(y))
}

#[cfg(test)]
mod tests;
