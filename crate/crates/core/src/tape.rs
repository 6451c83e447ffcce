//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its variables together with
//! the values it produced. [`Graph::backward`] then walks the record in
//! reverse, accumulating adjoints. Only the handful of operations needed by the
//! tokenizer and the recommender are provided.
//!
//! Every value is a 2-D matrix; scalars are `1 × 1`.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Mat,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
}

struct Node {
    op: Op,
    value: Mat,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Mat> {
        self.grads[var.0].as_ref()
    }

    /// Adjoint of `var`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, var: Var, shape: (usize, usize)) -> Mat {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Mat::zeros(shape))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), value, rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulT(a, b), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), value, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), value, rg)
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(Op::AddRow(a, row), value, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Mat) -> Var {
        let value = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(Op::MulConst(a, mask), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(Op::Gelu(a), value, rg)
    }

    /// Row-wise layer normalization with a `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let input = self.value(x);
        let n = input.ncols() as f64;
        let mut normed = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &normed * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            value,
            rg,
        )
    }

    /// Row-wise softmax restricted to entries where `allowed` is true.
    /// Disallowed entries get probability exactly zero. Every row must
    /// allow at least one entry.
    pub fn masked_softmax(&mut self, scores: Var, allowed: &Array2<bool>) -> Var {
        let mut value = self.value(scores).clone();
        Zip::from(value.rows_mut())
            .and(allowed.rows())
            .for_each(|mut row, mask| {
                let max = row
                    .iter()
                    .zip(mask.iter())
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (v, &m) in row.iter_mut().zip(mask.iter()) {
                    *v = if m { (*v - max).exp() } else { 0.0 };
                    total += *v;
                }
                row.mapv_inplace(|v| v / total);
            });
        let rg = self.rg(scores);
        self.push(Op::MaskedSoftmax(scores), value, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start), value, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), value, rg)
    }

    /// Embedding lookup: row `i` of the result is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let source = self.value(table);
        let mut value = Mat::zeros((ids.len(), source.ncols()));
        for (mut row, &id) in value.rows_mut().into_iter().zip(ids) {
            row.assign(&source.row(id));
        }
        let rg = self.rg(table);
        self.push(Op::GatherRows(table, ids.to_vec()), value, rg)
    }

    /// Sum of squared entries, as a `1 × 1` scalar.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().map(|v| v * v).sum::<f64>();
        let rg = self.rg(a);
        self.push(Op::SumSquares(a), Mat::from_elem((1, 1), total), rg)
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let input = self.value(logits);
        debug_assert_eq!(input.nrows(), targets.len());
        let probs = softmax_rows(input);
        let total = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -log_softmax_at(input.row(i).as_slice().unwrap(), t))
            .sum::<f64>();
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Mat::from_elem((1, 1), total),
            rg,
        )
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let g = upstream.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, g);
                    }
                    if self.rg(*b) {
                        let g = self.value(*a).t().dot(&upstream);
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        let g = upstream.dot(self.value(*b));
                        accumulate(&mut grads, *a, g);
                    }
                    if self.rg(*b) {
                        let g = upstream.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, upstream.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, upstream);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, -&upstream);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, upstream);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let g = upstream.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, g);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, upstream);
                    }
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, upstream * *factor);
                }
                Op::MulConst(a, mask) => {
                    accumulate(&mut grads, *a, upstream * mask);
                }
                Op::Relu(a) => {
                    let mut g = upstream;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0;
                            }
                        });
                    accumulate(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let mut g = upstream;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= gelu_derivative(x));
                    accumulate(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    if self.rg(*bias) {
                        let g = upstream.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *bias, g);
                    }
                    if self.rg(*gain) {
                        let g = (&upstream * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gain, g);
                    }
                    if self.rg(*x) {
                        let dnormed = &upstream * self.value(*gain);
                        let n = normed.ncols() as f64;
                        let mut dx = Mat::zeros(normed.dim());
                        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
                            let dn = dnormed.row(i);
                            let xn = normed.row(i);
                            let sum_dn = dn.sum();
                            let sum_dn_xn = dn.dot(&xn);
                            let inv = inv_std[i];
                            for j in 0..out.len() {
                                out[j] = inv / n * (n * dn[j] - sum_dn - xn[j] * sum_dn_xn);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MaskedSoftmax(scores) => {
                    let probs = &node.value;
                    let mut g = upstream;
                    Zip::from(g.rows_mut())
                        .and(probs.rows())
                        .for_each(|mut grow, prow| {
                            let dot = grow.dot(&prow);
                            Zip::from(&mut grow)
                                .and(&prow)
                                .for_each(|g, &p| *g = p * (*g - dot));
                        });
                    accumulate(&mut grads, *scores, g);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut g = Mat::zeros(src.dim());
                    g.slice_mut(s![.., *start..*start + upstream.ncols()])
                        .assign(&upstream);
                    accumulate(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).ncols();
                        if self.rg(p) {
                            let g = upstream.slice(s![.., offset..offset + width]).to_owned();
                            accumulate(&mut grads, p, g);
                        }
                        offset += width;
                    }
                }
                Op::GatherRows(table, ids) => {
                    let mut g = Mat::zeros(self.value(*table).dim());
                    for (row, &id) in upstream.rows().into_iter().zip(ids) {
                        let mut dst = g.row_mut(id);
                        dst += &row;
                    }
                    accumulate(&mut grads, *table, g);
                }
                Op::SumSquares(a) => {
                    let g = self.value(*a) * (2.0 * upstream[[0, 0]]);
                    accumulate(&mut grads, *a, g);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut g = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        g[[i, t]] -= 1.0;
                    }
                    g *= upstream[[0, 0]];
                    accumulate(&mut grads, *logits, g);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], var: Var, g: Mat) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// `log softmax(row)[index]` computed with max subtraction.
pub fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}

/// Log-softmax of a whole row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(build)/d(input) against central differences for every entry.
    fn check(input: Mat, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Mat::zeros(input.dim()));
        let h = 1e-6;
        for idx in ndarray::indices(input.dim()) {
            let eval = |delta: f64| {
                let mut shifted = input.clone();
                shifted[idx] += delta;
                let mut g = Graph::new();
                let x = g.param(shifted);
                let out = build(&mut g, x);
                g.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "entry {idx:?}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_and_transpose_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 4, 3);
        let c = random(&mut rng, 5, 3);
        check(random(&mut rng, 2, 4), |g, x| {
            let b = g.constant(b.clone());
            let y = g.matmul(x, b);
            let c = g.constant(c.clone());
            let z = g.matmul_t(y, c);
            g.sum_squares(z)
        });
        // matmul_t with the variable on the right-hand side
        let a = random(&mut rng, 3, 4);
        check(random(&mut rng, 5, 4), |g, x| {
            let a = g.constant(a.clone());
            let z = g.matmul_t(a, x);
            g.sum_squares(z)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gain = random(&mut rng, 1, 6);
        let bias = random(&mut rng, 1, 6);
        let w = random(&mut rng, 3, 6);
        check(random(&mut rng, 3, 6), |g, x| {
            let gn = g.constant(gain.clone());
            let b = g.constant(bias.clone());
            let y = g.layer_norm(x, gn, b);
            let y = g.mul_const(y, w.clone());
            g.sum_squares(y)
        });
        // gain and bias as the variable
        let input = random(&mut rng, 3, 6);
        check(gain.clone(), |g, x| {
            let i = g.constant(input.clone());
            let b = g.constant(bias.clone());
            let y = g.layer_norm(i, x, b);
            let y = g.scale(y, 0.7);
            let t = g.constant(w.clone());
            let y = g.sub(y, t);
            g.sum_squares(y)
        });
        check(bias, |g, x| {
            let i = g.constant(input.clone());
            let gn = g.constant(gain.clone());
            let y = g.layer_norm(i, gn, x);
            let t = g.constant(w.clone());
            let y = g.sub(y, t);
            g.sum_squares(y)
        });
    }

    #[test]
    fn masked_softmax_gradient_and_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let allowed = array![[true, true, false], [true, false, false], [true, true, true]];
        let w = random(&mut rng, 3, 3);
        check(random(&mut rng, 3, 3), |g, x| {
            let p = g.masked_softmax(x, &allowed);
            let w = g.constant(w.clone());
            let y = g.sub(p, w);
            g.sum_squares(y)
        });
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, 3, 3));
        let p = g.masked_softmax(x, &allowed);
        let p = g.value(p);
        assert_eq!(p[[0, 2]], 0.0);
        assert_eq!(p[[1, 0]], 1.0);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slicing_concat_gather_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bias = random(&mut rng, 1, 5);
        check(random(&mut rng, 6, 5), |g, x| {
            let rows = g.gather_rows(x, &[2, 0, 2, 5]);
            let b = g.constant(bias.clone());
            let rows = g.add_row(rows, b);
            let left = g.slice_cols(rows, 0, 2);
            let right = g.slice_cols(rows, 2, 3);
            let left = g.gelu(left);
            let right = g.relu(right);
            let joined = g.concat_cols(&[right, left]);
            g.sum_squares(joined)
        });
        check(random(&mut rng, 4, 7), |g, x| {
            let y = g.scale(x, 3.0);
            g.cross_entropy(y, &[0, 6, 3, 3])
        });
        // add_row bias gradient
        let input = random(&mut rng, 4, 5);
        check(bias, |g, x| {
            let i = g.constant(input.clone());
            let y = g.add_row(i, x);
            let y = g.add(y, i);
            g.cross_entropy(y, &[1, 1, 0, 4])
        });
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Mat::zeros((3, 8)));
        let ce = g.cross_entropy(x, &[0, 1, 7]);
        assert!((g.scalar(ce) - 3.0 * 8f64.ln()).abs() < 1e-12);
    }
}
