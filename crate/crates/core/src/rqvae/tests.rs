use super::*;
use crate::embeddings::synth_embeddings;
use ndarray::array;
use proptest::prelude::*;
use rand::Rng;

fn small_config(hidden: Vec<usize>, levels: usize, k: usize, dim: usize) -> RqVaeConfig {
    RqVaeConfig {
        levels,
        codebook_size: k,
        codebook_dim: dim,
        hidden,
        ..RqVaeConfig::default()
    }
}

fn random_book(rng: &mut ChaCha8Rng, level: usize, k: usize, dim: usize) -> Codebook {
    Codebook::new(
        level,
        Array2::from_shape_simple_fn((k, dim), || rng.random_range(-1.0..1.0)),
    )
    .unwrap()
}

fn identity_params(dim: usize, books: Vec<Codebook>) -> RqVaeParams {
    let config = small_config(vec![], books.len(), books[0].size(), dim);
    let eye = Array2::eye(dim);
    RqVaeParams::from_parts(
        config,
        dim,
        vec![eye.clone(), Array2::zeros((1, dim)), eye, Array2::zeros((1, dim))],
        books,
    )
    .unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, input: usize, hidden: Vec<usize>, dim: usize) -> RqVaeParams {
    let config = RqVaeConfig {
        activation: Activation::Gelu,
        ..small_config(hidden, 3, 4, dim)
    };
    let mut tensors = nn::init_mlp(rng, &config.encoder_dims(input));
    tensors.extend(nn::init_mlp(rng, &config.decoder_dims(input)));
    for t in &mut tensors {
        // non-zero biases exercise every path
        t.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
    }
    let books = (1..=3).map(|h| random_book(rng, h, 4, dim)).collect();
    RqVaeParams::from_parts(config, input, tensors, books).unwrap()
}

#[test]
fn identity_encoder_passes_input_through() {
    let mut rng = seed::rng(1);
    let p = identity_params(2, vec![random_book(&mut rng, 1, 2, 2)]);
    let z = array![0.3, -1.7];
    assert_eq!(p.encode(z.view()).unwrap(), z);
}

#[test]
fn zero_weights_yield_bias() {
    let mut rng = seed::rng(2);
    let config = small_config(vec![3], 1, 2, 2);
    let tensors = vec![
        Array2::zeros((4, 3)),
        array![[0.5, -0.5, 1.0]],
        Array2::zeros((3, 2)),
        array![[2.0, -3.0]],
        Array2::zeros((2, 3)),
        Array2::zeros((1, 3)),
        Array2::zeros((3, 4)),
        Array2::zeros((1, 4)),
    ];
    let p = RqVaeParams::from_parts(config, 4, tensors, vec![random_book(&mut rng, 1, 2, 2)]).unwrap();
    assert_eq!(p.encode(array![1.0, 2.0, 3.0, 4.0].view()).unwrap(), array![2.0, -3.0]);
}

#[test]
fn encode_rejects_bad_input() {
    let mut rng = seed::rng(3);
    let p = identity_params(2, vec![random_book(&mut rng, 1, 2, 2)]);
    assert!(matches!(
        p.encode(array![f64::NAN, 0.0].view()),
        Err(Error::NonFinite(_))
    ));
    assert!(p.encode(array![1.0].view()).is_err());
}

#[test]
fn encoder_input_gradient_matches_central_differences() {
    let mut rng = seed::rng(4);
    let p = random_params(&mut rng, 5, vec![6], 3);
    let z = Array2::from_shape_simple_fn((1, 5), || rng.random_range(-1.0..1.0));
    let weights = array![[0.7, -1.1, 0.4]];

    let objective = |input: &Array2<f64>| -> f64 {
        let r = p.encode_rows(input.view()).unwrap();
        (&r * &weights).sum()
    };
    let mut g = Graph::new();
    let x = g.param(z.clone());
    let enc: Vec<Var> = p.encoder_tensors().iter().map(|t| g.constant(t.clone())).collect();
    let r = nn::mlp_forward(&mut g, x, &enc, p.config.activation);
    let prod = g.mul_const(r, weights.clone());
    let ones = g.constant(Array2::ones((3, 1)));
    let s = g.matmul(prod, ones);
    let grads = g.backward(s);
    let analytic = grads.get(x).unwrap();

    let h = 1e-6;
    for j in 0..5 {
        let mut up = z.clone();
        up[[0, j]] += h;
        let mut down = z.clone();
        down[[0, j]] -= h;
        let numeric = (objective(&up) - objective(&down)) / (2.0 * h);
        let a = analytic[[0, j]];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-5);
    }
}

#[test]
fn quantize_examples() {
    let book = Codebook::new(1, array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let books = vec![book];
    let exact = quantize(&books, array![1.0, 0.0].view()).unwrap();
    assert_eq!(exact.tokens, vec![0]);
    assert_eq!(exact.residuals[1], array![0.0, 0.0]);

    let near = quantize(&books, array![0.9, 0.2].view()).unwrap();
    // squared distances: (0.1² + 0.2²) = 0.05 and (0.9² + 0.8²) = 1.45
    assert_eq!(near.tokens, vec![0]);
    assert!((near.residuals[1][0] + 0.1).abs() < 1e-15);
    assert!((near.residuals[1][1] - 0.2).abs() < 1e-15);

    let tie = quantize(&books, array![0.5, 0.5].view()).unwrap();
    assert_eq!(tie.tokens, vec![0]);

    assert!(quantize(&books, array![1.0, 0.0, 0.0].view()).is_err());
}

#[test]
fn level_one_codewords_quantize_to_themselves() {
    let mut rng = seed::rng(5);
    let books: Vec<Codebook> = (1..=3).map(|h| random_book(&mut rng, h, 8, 4)).collect();
    for k in 0..8 {
        let word = books[0].codewords.row(k).to_owned();
        let out = quantize(&books, word.view()).unwrap();
        assert_eq!(out.tokens[0], k);
    }
}

proptest! {
    #[test]
    fn residuals_telescope(seed in 0u64..1000, k in 2usize..16) {
        let mut rng = seed::rng(seed);
        let books: Vec<Codebook> = (1..=3).map(|h| random_book(&mut rng, h, k, 5)).collect();
        let r = Array1::from_shape_simple_fn(5, || rng.random_range(-3.0..3.0));
        let out = quantize(&books, r.view()).unwrap();
        prop_assert_eq!(&out.residuals[0], &r);
        for h in 0..3 {
            let step = &out.residuals[h] - &books[h].codewords.row(out.tokens[h]);
            prop_assert_eq!(&out.residuals[h + 1], &step);
        }
        let back = &out.quantized + &out.residuals[3];
        for (a, b) in back.iter().zip(r.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn representable_latent_has_zero_loss() {
    let book1 = Codebook::new(1, array![[0.0, 0.0], [1.0, 2.0]]).unwrap();
    let book2 = Codebook::new(2, array![[3.0, 3.0], [0.0, 0.0]]).unwrap();
    let p = identity_params(2, vec![book1, book2]);
    let z = array![1.0, 2.0];
    let outcome = quantize(&p.codebooks, p.encode(z.view()).unwrap().view()).unwrap();
    let (loss, grad) = rq_losses(&p, z.view(), &outcome).unwrap();
    assert_eq!(loss, LossBreakdown { recon: 0.0, rq: 0.0, total: 0.0 });
    assert!(grad.iter().all(|g| *g == 0.0));
    assert_eq!(p.config.beta, 0.25);
}

/// Independent forward pass with plain loops.
fn plain_mlp(tensors: &[Mat], input: &Array1<f64>, activation: Activation) -> Array1<f64> {
    let layers = tensors.len() / 2;
    let mut x = input.clone();
    for l in 0..layers {
        let (w, b) = (&tensors[2 * l], &tensors[2 * l + 1]);
        let mut out = Array1::zeros(w.ncols());
        for j in 0..w.ncols() {
            let mut acc = b[[0, j]];
            for i in 0..w.nrows() {
                acc += x[i] * w[[i, j]];
            }
            out[j] = acc;
        }
        if l + 1 < layers {
            out.mapv_inplace(|v| match activation {
                Activation::Relu => v.max(0.0),
                Activation::Gelu => {
                    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
                }
            });
        }
        x = out;
    }
    x
}

#[test]
fn straight_through_gradients_match_finite_differences() {
    let mut rng = seed::rng(6);
    let p = random_params(&mut rng, 6, vec![5], 3);
    let z = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
    let outcome = quantize(&p.codebooks, p.encode(z.view()).unwrap().view()).unwrap();
    let (_, analytic) = rq_losses(&p, z.view(), &outcome).unwrap();

    // surrogate: quantization offset and codeword targets frozen at the base point
    let enc_len = p.encoder_tensors().len();
    let r0 = plain_mlp(p.encoder_tensors(), &z, p.config.activation);
    let offset = &outcome.quantized - &r0;
    let mut targets = Vec::new();
    let mut acc = Array1::<f64>::zeros(3);
    for (h, &c) in outcome.tokens.iter().enumerate() {
        acc = &acc + &p.codebooks[h].codewords.row(c);
        targets.push(acc.clone());
    }
    let surrogate = |tensors: &[Mat]| -> f64 {
        let r = plain_mlp(&tensors[..enc_len], &z, p.config.activation);
        let zhat = plain_mlp(&tensors[enc_len..], &(&r + &offset), p.config.activation);
        let recon: f64 = (&zhat - &z).mapv(|v| v * v).sum();
        let commit: f64 = targets.iter().map(|t| (&r - t).mapv(|v| v * v).sum()).sum();
        recon + p.config.beta * commit
    };

    let h = 1e-6;
    let mut flat_index = 0;
    let mut checked = 0;
    for (ti, tensor) in p.tensors.iter().enumerate() {
        for idx in ndarray::indices(tensor.dim()) {
            let mut up = p.tensors.clone();
            up[ti][idx] += h;
            let mut down = p.tensors.clone();
            down[ti][idx] -= h;
            let numeric = (surrogate(&up) - surrogate(&down)) / (2.0 * h);
            let a = analytic[flat_index];
            let denom = a.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (a - numeric).abs() / denom < 1e-4,
                "tensor {ti} {idx:?}: analytic {a}, numeric {numeric}"
            );
            flat_index += 1;
            checked += 1;
        }
    }
    assert_eq!(checked, p.parameter_count());
}

fn roomy(hidden: Vec<usize>, levels: usize, k: usize, dim: usize) -> RqVaeConfig {
    RqVaeConfig {
        collision_capacity: 64,
        ..small_config(hidden, levels, k, dim)
    }
}

fn clustered(seed: u64, clusters: usize, per: usize, dim: usize, spread: f64) -> SemanticEmbeddingMatrix {
    synth_embeddings(clusters, per, dim, spread, seed, clusters * per).unwrap()
}

#[test]
fn zero_learning_rate_freezes_networks() {
    let data = clustered(7, 4, 16, 8, 0.1);
    let mut trainer = TokenizerTrainer::new(small_config(vec![16], 2, 4, 4), &data, 16, 9).unwrap();
    let before = trainer.params.tensors.clone();
    let books_before = trainer.params.codebooks.clone();
    trainer.train_epoch(&data, 0.0).unwrap();
    assert_eq!(trainer.params.tensors, before);
    assert_ne!(trainer.params.codebooks, books_before);
}

#[test]
fn training_is_deterministic() {
    let data = clustered(8, 4, 16, 8, 0.1);
    let run = || {
        let mut t = TokenizerTrainer::new(small_config(vec![16], 2, 4, 4), &data, 16, 3).unwrap();
        (0..5).map(|_| t.train_epoch(&data, 0.05).unwrap().total).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_reconstruction() {
    let data = clustered(10, 8, 16, 8, 0.05);
    let mut t = TokenizerTrainer::new(small_config(vec![32], 3, 8, 8), &data, 32, 4).unwrap();
    let first = t.train_epoch(&data, 0.05).unwrap();
    let mut last = first;
    for _ in 0..40 {
        last = t.train_epoch(&data, 0.05).unwrap();
    }
    assert!(last.recon < 0.5 * first.recon, "{first:?} -> {last:?}");
}

#[test]
fn distinct_first_tokens_need_no_collision_index() {
    let rows = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
    let data = SemanticEmbeddingMatrix::new(rows.clone()).unwrap();
    let book1 = Codebook::new(1, rows).unwrap();
    let book2 = Codebook::new(2, array![[0.0, 0.0], [9.0, 9.0], [9.0, -9.0], [-9.0, 9.0]]).unwrap();
    let p = identity_params(2, vec![book1, book2]);
    let ids = assign_identifiers(&p, &data).unwrap();
    for (i, id) in ids.iter().enumerate() {
        assert_eq!(id.tokens(), &[i as u32, 0, 0]);
    }
}

#[test]
fn identical_items_get_collision_ranks() {
    let data = SemanticEmbeddingMatrix::new(array![[0.2, 0.1], [0.2, 0.1], [5.0, 5.0]]).unwrap();
    let book = Codebook::new(1, array![[0.0, 0.0], [5.0, 5.0]]).unwrap();
    let p = identity_params(2, vec![book]);
    let ids = assign_identifiers(&p, &data).unwrap();
    assert_eq!(ids[0].semantic(), ids[1].semantic());
    assert_eq!((ids[0].collision(), ids[1].collision()), (0, 1));
    assert_eq!(ids[2].collision(), 0);

    let mut tight = p.clone();
    tight.config.collision_capacity = 1;
    assert!(matches!(
        assign_identifiers(&tight, &data),
        Err(Error::CollisionOverflow { size: 2, capacity: 1 })
    ));
}

#[test]
fn random_catalog_identifiers_are_injective() {
    let mut rng = seed::rng(12);
    let rows = Array2::from_shape_simple_fn((256, 6), || rng.random_range(-1.0..1.0));
    let data = SemanticEmbeddingMatrix::new(rows).unwrap();
    let mut config = small_config(vec![8], 3, 4, 4);
    config.collision_capacity = 256;
    let p = RqVaeParams::initialize(config, &data, &mut rng).unwrap();
    let ids = assign_identifiers(&p, &data).unwrap();
    for i in 0..ids.len() {
        assert_eq!(ids[i].len(), 4);
        for j in i + 1..ids.len() {
            assert_ne!(ids[i], ids[j], "items {i} and {j}");
        }
    }
}

#[test]
fn snapshots_are_frozen() {
    let data = clustered(13, 4, 16, 8, 0.2);
    let mut t = TokenizerTrainer::new(roomy(vec![16], 3, 4, 4), &data, 16, 5).unwrap();
    for _ in 0..3 {
        t.train_epoch(&data, 0.05).unwrap();
    }
    let frozen_params = t.params.clone();
    let snap = snapshot_checkpoint(&t.params, &data, 3).unwrap();
    let again = snapshot_checkpoint(&t.params, &data, 3).unwrap();
    assert_eq!(snap, again);
    let copy = snap.clone();
    for _ in 0..5 {
        t.train_epoch(&data, 0.05).unwrap();
    }
    assert_eq!(snap, copy);
    assert_eq!(snap.epoch, 3);

    // recompute from the frozen codebooks
    let mut rebuilt = frozen_params;
    for (book, words) in rebuilt.codebooks.iter_mut().zip(&snap.codebooks) {
        book.codewords = words.clone();
    }
    assert_eq!(assign_identifiers(&rebuilt, &data).unwrap(), snap.identifiers());
    assert!(snapshot_checkpoint(&t.params, &data, 0).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let data = clustered(14, 4, 8, 6, 0.2);
    let t = TokenizerTrainer::new(roomy(vec![8], 3, 4, 4), &data, 8, 6).unwrap();
    let snap = snapshot_checkpoint(&t.params, &data, 17).unwrap();
    let mut buf = Vec::new();
    snap.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"MTGT");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), TOKENIZER_VERSION);
    let text = String::from_utf8_lossy(&buf);
    assert!(text.contains("\n5\t") || text.contains("5\t"));
    let back = TokenizerCheckpoint::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, snap);
    for item in 0..snap.num_items() {
        assert_eq!(back.item_of(snap.identifier(item).unwrap()), Some(item));
    }
    buf[1] = b'X';
    assert!(TokenizerCheckpoint::read_from(buf.as_slice()).is_err());
}
