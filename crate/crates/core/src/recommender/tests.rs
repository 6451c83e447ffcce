use super::*;
use crate::seed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_inner: 12,
        heads: 2,
        layers: 1,
        max_positions: 24,
        ..ModelConfig::default()
    }
}

fn tiny_model(seed: u64, k: usize, levels: usize) -> ModelParams {
    let vocab = Vocabulary::new(levels, k, k).unwrap();
    let mut params = ModelParams::initialize(tiny_config(), vocab, &mut seed::rng(seed)).unwrap();
    // non-trivial norms and biases
    let mut rng = seed::rng(seed ^ 0xabc);
    for (t, (name, _)) in params.tensors.iter_mut().zip(layout(&tiny_config(), &vocab)) {
        if name.ends_with("gain") || name.ends_with("bias") || name.contains(".b") {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
    }
    params
}

fn random_identifier(rng: &mut ChaCha8Rng, vocab: &Vocabulary) -> Vec<u32> {
    (0..vocab.id_len())
        .map(|l| vocab.token_id(l, rng.random_range(0..vocab.codes_at(l) as u32)).unwrap())
        .collect()
}

fn random_history(rng: &mut ChaCha8Rng, vocab: &Vocabulary, items: usize) -> Vec<u32> {
    (0..items).flat_map(|_| random_identifier(rng, vocab)).collect()
}

#[test]
fn vocabulary_layout() {
    let v = Vocabulary::new(3, 8, 5).unwrap();
    assert_eq!(v.width(), 8);
    assert_eq!(v.size(), 2 + 4 * 8);
    assert_eq!(v.token_id(0, 0).unwrap(), 2);
    assert_eq!(v.token_id(3, 4).unwrap(), 2 + 24 + 4);
    assert!(v.token_id(3, 5).is_err());
    assert!(v.token_id(0, 8).is_err());
    assert!(v.token_id(4, 0).is_err());
    assert_eq!(v.decode(PAD), None);
    assert_eq!(v.decode(BOS), None);
    assert_eq!(v.decode(2 + 24 + 6), None);
    let id = Identifier::new(vec![1, 7, 0, 4]);
    let toks = v.encode_identifier(&id).unwrap();
    assert_eq!(v.to_identifier(&toks), Some(id));
    assert_eq!(v.to_identifier(&[toks[1], toks[0], toks[2], toks[3]]), None);
}

proptest! {
    #[test]
    fn token_ids_are_injective(levels in 1usize..5, k in 1usize..20, cap in 1usize..20) {
        let v = Vocabulary::new(levels, k, cap).unwrap();
        let mut seen = std::collections::HashSet::new();
        for level in 0..=levels {
            for code in 0..v.codes_at(level) as u32 {
                let t = v.token_id(level, code).unwrap();
                prop_assert!((t as usize) < v.size());
                prop_assert!(seen.insert(t));
                prop_assert_eq!(v.decode(t), Some((level, code)));
            }
        }
    }
}

#[test]
fn zero_output_projection_is_uniform() {
    let mut p = tiny_model(1, 4, 3);
    p.tensor_mut("output.weight").unwrap().fill(0.0);
    p.tensor_mut("output.bias").unwrap().fill(0.0);
    let mut rng = seed::rng(2);
    let x = random_history(&mut rng, &p.vocab, 3);
    let y = random_identifier(&mut rng, &p.vocab);
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(&y[..3]);
    let logits = p.forward_logits(&x, &prefix).unwrap();
    let probs = crate::tape::softmax_rows(&logits);
    let v = p.vocab.size() as f64;
    for row in probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|q| (q - 1.0 / v).abs() < 1e-15));
    }
    let loss = p.sequence_loss(&x, &y).unwrap();
    assert!((loss - 4.0 * v.ln()).abs() < 1e-12);
}

#[test]
fn probabilities_sum_to_one() {
    let p = tiny_model(3, 4, 3);
    let mut rng = seed::rng(4);
    let x = random_history(&mut rng, &p.vocab, 4);
    let y = random_identifier(&mut rng, &p.vocab);
    let logits = p.forward_logits(&x, &[BOS, y[0], y[1]]).unwrap();
    for row in crate::tape::softmax_rows(&logits).rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn decoder_is_causal() {
    let p = tiny_model(5, 4, 3);
    let mut rng = seed::rng(6);
    let x = random_history(&mut rng, &p.vocab, 2);
    let y = random_identifier(&mut rng, &p.vocab);
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(&y[..3]);
    let base = p.forward_logits(&x, &prefix).unwrap();
    for pos in 1..prefix.len() {
        let mut changed = prefix.clone();
        changed[pos] = if changed[pos] == 2 { 3 } else { 2 };
        let out = p.forward_logits(&x, &changed).unwrap();
        for row in 0..pos {
            assert_eq!(out.row(row), base.row(row), "position {pos} leaked into row {row}");
        }
        assert_ne!(out.row(pos), base.row(pos));
    }
}

#[test]
fn pad_tail_is_ignored() {
    let p = tiny_model(7, 4, 3);
    let mut rng = seed::rng(8);
    let x = random_history(&mut rng, &p.vocab, 2);
    let prefix = [BOS, p.vocab.token_id(0, 1).unwrap()];
    let base = p.forward_logits(&x, &prefix).unwrap();
    let mut padded = x.clone();
    padded.extend([PAD; 5]);
    let out = p.forward_logits(&padded, &prefix).unwrap();
    for (a, b) in out.iter().zip(base.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let p = tiny_model(9, 4, 3);
    let bad = p.vocab.size() as u32;
    assert!(matches!(
        p.forward_logits(&[2, bad], &[BOS]),
        Err(Error::TokenOutOfRange { .. })
    ));
    assert!(p.forward_logits(&[PAD, PAD], &[BOS]).is_err());
    assert!(p.forward_logits(&[2], &[2]).is_err());
    assert!(p.forward_logits(&[2; 25], &[BOS]).is_err());
    assert!(p.sequence_nll(&[2], &[2, 7]).is_err());
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn gradients_match_central_differences() {
    for activation in [Activation::Relu, Activation::Gelu] {
        let mut p = tiny_model(10, 3, 3);
        p.config.activation = activation;
        let mut rng = seed::rng(11);
        let x = random_history(&mut rng, &p.vocab, 3);
        let y = random_identifier(&mut rng, &p.vocab);
        let (loss, grad) = p.sequence_nll(&x, &y).unwrap();
        assert_eq!(loss, p.sequence_loss(&x, &y).unwrap());
        let base = p.flatten();
        let mut coords: Vec<usize> = (0..base.len()).collect();
        coords.shuffle(&mut rng);
        let h = 1e-5;
        let mut probe = p.clone();
        for &i in coords.iter().take(250) {
            let mut theta = base.clone();
            theta[i] = base[i] + h;
            probe.set_flat(&theta);
            let up = probe.sequence_loss(&x, &y).unwrap();
            theta[i] = base[i] - h;
            probe.set_flat(&theta);
            let down = probe.sequence_loss(&x, &y).unwrap();
            let numeric = (up - down) / (2.0 * h);
            assert!(
                relative_error(grad[i], numeric) < 1e-4,
                "{activation:?} coordinate {i}: analytic {} numeric {numeric}",
                grad[i]
            );
        }
    }
}

#[test]
fn overfitting_one_pair_drives_loss_to_zero() {
    let mut p = tiny_model(12, 3, 3);
    let mut rng = seed::rng(13);
    let pair = EncodedPair {
        x: random_history(&mut rng, &p.vocab, 2),
        y: random_identifier(&mut rng, &p.vocab),
    };
    let mut adam = Adam::new(p.parameter_count(), 0.0);
    let first = train_step(&mut p, std::slice::from_ref(&pair), &mut adam, 0.02, None).unwrap();
    let mut last = first;
    for _ in 0..300 {
        last = train_step(&mut p, std::slice::from_ref(&pair), &mut adam, 0.02, None).unwrap();
    }
    assert!(last < 1e-2, "{first} -> {last}");
}

fn batch(seed: u64, vocab: &Vocabulary, n: usize) -> Vec<EncodedPair> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|i| EncodedPair {
            x: random_history(&mut rng, vocab, 1 + i % 4),
            y: random_identifier(&mut rng, vocab),
        })
        .collect()
}

#[test]
fn batch_gradient_is_the_pairwise_mean() {
    let p = tiny_model(14, 3, 3);
    let pairs = batch(15, &p.vocab, 5);
    let (loss, grad) = batch_gradient(&p, &pairs, None).unwrap();
    let mut sum = vec![0.0; grad.len()];
    let mut total = 0.0;
    for pair in &pairs {
        let (l, g) = p.sequence_nll(&pair.x, &pair.y).unwrap();
        total += l;
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    assert!((loss - total / 5.0).abs() < 1e-12);
    for (a, b) in grad.iter().zip(&sum) {
        assert!((a - b / 5.0).abs() < 1e-12);
    }
}

#[test]
fn training_is_bit_identical_across_thread_counts() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut p = tiny_model(16, 3, 3);
            let pairs = batch(17, &p.vocab, 12);
            let mut adam = Adam::new(p.parameter_count(), 0.0);
            let trace: Vec<f64> = (0..4)
                .map(|s| train_step(&mut p, &pairs, &mut adam, crate::optim::cosine_lr(s, 4, 0.01), None).unwrap())
                .collect();
            (trace, p)
        })
    };
    let (a, pa) = run(1);
    let (b, pb) = run(4);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(pa, pb);
}

#[test]
fn dropout_changes_training_but_stays_seeded() {
    let mut p = tiny_model(18, 3, 3);
    p.config.dropout = 0.3;
    let pairs = batch(19, &p.vocab, 4);
    let seeds = [1u64, 2, 3, 4];
    let (a, _) = batch_gradient(&p, &pairs, Some(&seeds)).unwrap();
    let (b, _) = batch_gradient(&p, &pairs, Some(&seeds)).unwrap();
    let (plain, _) = batch_gradient(&p, &pairs, None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, plain);
}

/// Exact log-probability of a full token sequence by teacher forcing.
fn sequence_logprob(p: &ModelParams, x: &[u32], y: &[u32]) -> f64 {
    -p.sequence_loss(x, y).unwrap()
}

fn all_identifiers(vocab: &Vocabulary) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = vec![Vec::new()];
    for level in 0..vocab.id_len() {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..vocab.codes_at(level) as u32).map(move |c| {
                    let mut next = prefix.clone();
                    next.push(vocab.token_id(level, c).unwrap());
                    next
                })
            })
            .collect();
    }
    out
}

#[test]
fn saturated_beam_matches_exhaustive_enumeration() {
    for seed in 0..5 {
        let p = tiny_model(100 + seed, 3, 2);
        let mut rng = seed::rng(200 + seed);
        let x = random_history(&mut rng, &p.vocab, 2);
        let mut oracle: Vec<(Vec<u32>, f64)> = all_identifiers(&p.vocab)
            .into_iter()
            .map(|y| {
                let lp = sequence_logprob(&p, &x, &y);
                (y, lp)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let beams = beam_search(&p, &x, 27, DecodeMode::Constrained).unwrap();
        assert_eq!(beams.len(), 27);
        for (b, (y, lp)) in beams.iter().zip(&oracle) {
            assert_eq!(&b.prefix, y);
            assert!((b.logprob - lp).abs() < 1e-9);
            assert!(b.logprob <= 0.0);
        }
    }
}

#[test]
fn width_one_is_greedy() {
    let p = tiny_model(21, 4, 3);
    let mut rng = seed::rng(22);
    let x = random_history(&mut rng, &p.vocab, 3);
    let mut prefix = vec![BOS];
    for level in 0..p.vocab.id_len() {
        let logits = p.forward_logits(&x, &prefix).unwrap();
        let last = logits.row(prefix.len() - 1);
        let best = (0..p.vocab.codes_at(level) as u32)
            .map(|c| p.vocab.token_id(level, c).unwrap())
            .max_by(|a, b| last[*a as usize].partial_cmp(&last[*b as usize]).unwrap())
            .unwrap();
        prefix.push(best);
    }
    let beams = beam_search(&p, &x, 1, DecodeMode::Constrained).unwrap();
    assert_eq!(beams.len(), 1);
    assert_eq!(beams[0].prefix, prefix[1..]);
    assert!(beam_search(&p, &x, 0, DecodeMode::Constrained).is_err());
}

#[test]
fn top_logprob_grows_with_width() {
    for seed in 0..5 {
        let p = tiny_model(300 + seed, 4, 3);
        let mut rng = seed::rng(400 + seed);
        let x = random_history(&mut rng, &p.vocab, 2);
        let mut previous = f64::NEG_INFINITY;
        for width in [1, 2, 4, 8, 16, 64, 256] {
            let top = beam_search(&p, &x, width, DecodeMode::Constrained).unwrap()[0].logprob;
            assert!(top >= previous - 1e-12, "width {width}: {top} < {previous}");
            previous = top;
        }
    }
}

#[test]
fn uniform_model_ranks_lexicographically() {
    let mut p = tiny_model(23, 3, 2);
    p.tensor_mut("output.weight").unwrap().fill(0.0);
    p.tensor_mut("output.bias").unwrap().fill(0.0);
    let x = random_history(&mut seed::rng(24), &p.vocab, 2);
    let beams = beam_search(&p, &x, 10, DecodeMode::Constrained).unwrap();
    let expected: Vec<Vec<u32>> = all_identifiers(&p.vocab).into_iter().take(10).collect();
    let got: Vec<Vec<u32>> = beams.into_iter().map(|b| b.prefix).collect();
    assert_eq!(got, expected);
}

#[test]
fn unconstrained_beams_may_hold_invalid_sequences() {
    let p = tiny_model(25, 3, 2);
    let x = random_history(&mut seed::rng(26), &p.vocab, 2);
    let beams = beam_search(&p, &x, 30, DecodeMode::Unconstrained).unwrap();
    assert_eq!(beams.len(), 30);
    let valid = beams.iter().filter(|b| b.identifier(&p).is_some()).count();
    assert!(valid < 30);
    for w in beams.windows(2) {
        assert!(w[0].logprob >= w[1].logprob);
    }
}

#[test]
fn identifier_mapping_filters_then_truncates() {
    use crate::family::tests::checkpoint;
    let tok = checkpoint(1, &[[0, 0, 0, 0], [1, 0, 0, 0], [2, 1, 0, 0]]);
    let id = |t: [u32; 4]| Identifier::new(t.to_vec());
    let ranked = vec![id([5, 5, 5, 0]), id([2, 1, 0, 0]), id([7, 0, 0, 0]), id([0, 0, 0, 0]), id([1, 0, 0, 0])];
    let oracle: Vec<usize> = ranked.iter().filter_map(|i| tok.item_of(i)).take(2).collect();
    assert_eq!(identifiers_to_items(&ranked, &tok, 2), oracle);
    assert_eq!(identifiers_to_items(&ranked, &tok, 2), vec![2, 0]);
    assert_eq!(identifiers_to_items(&ranked, &tok, 10).len(), 3);
    assert!(identifiers_to_items(&ranked[..1], &tok, 10).is_empty());
}

#[test]
fn checkpoint_round_trip() {
    let p = tiny_model(27, 4, 3);
    let mut buf = Vec::new();
    p.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"MTGM");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), MODEL_VERSION);
    assert_eq!(ModelParams::read_from(buf.as_slice()).unwrap(), p);
    let mut truncated = buf.clone();
    truncated.truncate(buf.len() - 8);
    assert!(ModelParams::read_from(truncated.as_slice()).is_err());
    let mut wrong = buf;
    wrong[8] = 9;
    assert!(ModelParams::read_from(wrong.as_slice()).is_err());
}

#[test]
fn parameter_count_is_deterministic() {
    let a = tiny_model(28, 4, 3);
    let b = tiny_model(29, 4, 3);
    assert_eq!(a.parameter_count(), b.parameter_count());
    let expected: usize = layout(&a.config, &a.vocab).iter().map(|(_, (r, c))| r * c).sum();
    assert_eq!(a.parameter_count(), expected);
}
