use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{ModelParams, BOS};
use crate::error::Result;
use crate::family::Identifier;
use crate::rqvae::TokenizerCheckpoint;
use crate::tape::log_softmax;

/// Decoder rows evaluated per graph.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Step `h` only considers level-`h` tokens.
    #[default]
    Constrained,
    /// Every step considers the whole vocabulary.
    Unconstrained,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated token ids, without the leading `BOS`.
    pub prefix: Vec<u32>,
    /// Sum of full-vocabulary log-probabilities of `prefix`.
    pub logprob: f64,
}

impl BeamHypothesis {
    pub fn identifier(&self, params: &ModelParams) -> Option<Identifier> {
        params.vocab.to_identifier(&self.prefix)
    }
}

/// Fixed-depth beam search over `H+1` steps. Candidates are ranked by
/// log-probability; ties go to the earlier hypothesis, then the lower token.
pub fn beam_search(
    params: &ModelParams,
    x: &[u32],
    beam_width: usize,
    mode: DecodeMode,
) -> Result<Vec<BeamHypothesis>> {
    if beam_width == 0 {
        return Err(crate::Error::InvalidArgument("beam_width must be at least 1".into()));
    }
    let memory = params.encode_memory(x)?;
    let vocab = params.vocab;
    let mut beams = vec![BeamHypothesis {
        prefix: Vec::new(),
        logprob: 0.0,
    }];
    for level in 0..vocab.id_len() {
        let rows: Vec<Vec<u32>> = beams
            .iter()
            .map(|b| {
                let mut r = Vec::with_capacity(b.prefix.len() + 1);
                r.push(BOS);
                r.extend_from_slice(&b.prefix);
                r
            })
            .collect();
        let candidates: Vec<u32> = match mode {
            DecodeMode::Constrained => (0..vocab.codes_at(level) as u32)
                .map(|c| vocab.token_id(level, c))
                .collect::<Result<_>>()?,
            DecodeMode::Unconstrained => (0..vocab.size() as u32).collect(),
        };
        let mut scored: Vec<(f64, usize, u32)> = Vec::with_capacity(rows.len() * candidates.len());
        for (chunk_index, chunk) in rows.chunks(CHUNK).enumerate() {
            let refs: Vec<&[u32]> = chunk.iter().map(|r| r.as_slice()).collect();
            let logits = params.last_logits(&memory, x, &refs);
            for (offset, row) in logits.rows().into_iter().enumerate() {
                let hyp = chunk_index * CHUNK + offset;
                let lsm = log_softmax(&row.to_vec());
                for &tok in &candidates {
                    scored.push((beams[hyp].logprob + lsm[tok as usize], hyp, tok));
                }
            }
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        scored.truncate(beam_width);
        beams = scored
            .into_iter()
            .map(|(logprob, hyp, tok)| {
                let mut prefix = beams[hyp].prefix.clone();
                prefix.push(tok);
                BeamHypothesis { prefix, logprob }
            })
            .collect();
    }
    Ok(beams)
}

/// Items named by `ranked` under `tokenizer`, unknown identifiers dropped,
/// truncated to `top_n`.
pub fn identifiers_to_items(
    ranked: &[Identifier],
    tokenizer: &TokenizerCheckpoint,
    top_n: usize,
) -> Vec<usize> {
    ranked
        .iter()
        .filter_map(|id| tokenizer.item_of(id))
        .take(top_n)
        .collect()
}
