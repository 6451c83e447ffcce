//! Item semantic embeddings: synthesis, binary file IO and PCA whitening.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MTGE";

/// Default variance floor added to every eigenvalue before rescaling.
pub const DEFAULT_WHITENING_EPS: f64 = 1e-9;

/// Row `i` is the embedding of catalog item `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbeddingMatrix {
    rows: Array2<f64>,
}

impl SemanticEmbeddingMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding entry {bad}")));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Errors unless there is one row per catalog item.
    pub fn check_catalog_size(&self, catalog_size: usize) -> Result<()> {
        if self.len() != catalog_size {
            return Err(Error::DimensionMismatch {
                expected: catalog_size,
                got: self.len(),
            });
        }
        Ok(())
    }

    /// Writes the `MTGE` format: magic, u32 rows, u32 dim, u32 reserved, then
    /// row-major little-endian `f32`.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(EMBEDDING_MAGIC)?;
        out.write_all(&(self.len() as u32).to_le_bytes())?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        for v in self.rows.iter() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::Format(format!("embedding header: {e}")))?;
        if &header[..4] != EMBEDDING_MAGIC {
            return Err(Error::Format("embedding file lacks MTGE magic".into()));
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut body = vec![0u8; rows * dim * 4];
        input
            .read_exact(&mut body)
            .map_err(|e| Error::Format(format!("embedding body truncated: {e}")))?;
        let values: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let rows = Array2::from_shape_vec((rows, dim), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut file).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Clustered stand-in for text-encoder output: item `i` belongs to cluster
/// `i / items_per_cluster` and sits at its center plus isotropic Gaussian noise
/// of scale `spread`. Centers are standard normal vectors.
pub fn synth_embeddings(
    num_clusters: usize,
    items_per_cluster: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    catalog_size: usize,
) -> Result<SemanticEmbeddingMatrix> {
    if num_clusters == 0 || items_per_cluster == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "cluster count, cluster size and dimension must be positive".into(),
        ));
    }
    if num_clusters * items_per_cluster != catalog_size {
        return Err(Error::DimensionMismatch {
            expected: catalog_size,
            got: num_clusters * items_per_cluster,
        });
    }
    let mut rng = seed::rng(seed);
    let centers: Array2<f64> = Array2::from_shape_simple_fn((num_clusters, dim), || {
        StandardNormal.sample(&mut rng)
    });
    let mut rows = Array2::zeros((catalog_size, dim));
    for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
        let center = centers.row(i / items_per_cluster);
        for (v, &c) in row.iter_mut().zip(center.iter()) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = c + spread * noise;
        }
    }
    SemanticEmbeddingMatrix::new(rows)
}

/// Centering plus projection onto the leading principal directions, each
/// rescaled by `1 / sqrt(eigenvalue + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Array1<f64>,
    /// `d × out_dim`; column `j` is the `j`-th eigenvector divided by `sqrt(λ_j + eps)`.
    pub projection: Array2<f64>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub eps: f64,
}

pub fn fit_whitening(
    embeddings: &SemanticEmbeddingMatrix,
    out_dim: usize,
    eps: f64,
) -> Result<WhiteningTransform> {
    let d = embeddings.dim();
    let n = embeddings.len();
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidArgument(format!(
            "whitening out_dim {out_dim} must lie in 1..={d}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "whitening needs at least two rows".into(),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("whitening eps must be positive".into()));
    }
    let rows = embeddings.rows();
    let mean = rows.mean_axis(Axis(0)).expect("non-empty");
    let centered = rows - &mean;
    let cov = centered.t().dot(&centered) / n as f64;

    let sym = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut projection = Array2::zeros((d, out_dim));
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for (col, &k) in order.iter().take(out_dim).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        let vector = eig.eigenvectors.column(k);
        // sign convention: the largest-magnitude component is positive
        let pivot = vector
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / (lambda + eps).sqrt();
        for row in 0..d {
            projection[[row, col]] = vector[row] * scale;
        }
        eigenvalues.push(lambda);
    }
    Ok(WhiteningTransform {
        mean,
        projection,
        eigenvalues,
        eps,
    })
}

impl WhiteningTransform {
    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }
}

pub fn apply_whitening(
    transform: &WhiteningTransform,
    embeddings: &SemanticEmbeddingMatrix,
) -> Result<SemanticEmbeddingMatrix> {
    if embeddings.dim() != transform.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: transform.input_dim(),
            got: embeddings.dim(),
        });
    }
    let centered = embeddings.rows() - &transform.mean;
    SemanticEmbeddingMatrix::new(centered.dot(&transform.projection))
}
