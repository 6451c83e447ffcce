//! Layers shared by the tokenizer and the recommender, expressed on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Graph, Mat, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// Glorot-uniform `rows × cols` matrix.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

/// Weights and biases for an MLP through `dims = [in, hidden.., out]`,
/// laid out as `w0, b0, w1, b1, ...` with `w_i: dims[i] × dims[i+1]`.
pub fn init_mlp(rng: &mut impl Rng, dims: &[usize]) -> Vec<Mat> {
    dims.windows(2)
        .flat_map(|w| [glorot(rng, w[0], w[1]), Mat::zeros((1, w[1]))])
        .collect()
}

/// Affine stack with `activation` between layers and a linear output.
pub fn mlp_forward(g: &mut Graph, input: Var, params: &[Var], activation: Activation) -> Var {
    let layers = params.len() / 2;
    let mut x = input;
    for (i, wb) in params.chunks_exact(2).enumerate() {
        let h = g.matmul(x, wb[0]);
        x = g.add_row(h, wb[1]);
        if i + 1 < layers {
            x = activation.apply(g, x);
        }
    }
    x
}

/// Total number of scalars across `tensors`.
pub fn parameter_count(tensors: &[Mat]) -> usize {
    tensors.iter().map(|t| t.len()).sum()
}

/// Concatenates tensors row-major into one flat vector.
pub fn flatten(tensors: &[Mat]) -> Vec<f64> {
    let mut out = Vec::with_capacity(parameter_count(tensors));
    for t in tensors {
        out.extend(t.iter().copied());
    }
    out
}

/// Inverse of [`flatten`] for tensors of the same shapes.
pub fn unflatten_into(tensors: &mut [Mat], flat: &[f64]) {
    let mut offset = 0;
    for t in tensors.iter_mut() {
        let n = t.len();
        for (dst, src) in t.iter_mut().zip(&flat[offset..offset + n]) {
            *dst = *src;
        }
        offset += n;
    }
    debug_assert_eq!(offset, flat.len());
}
