use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};

/// Floor on EMA cluster sizes when turning running sums into codewords.
pub const EMA_COUNT_FLOOR: f64 = 1e-5;

/// One level's codewords plus the running statistics behind their EMA updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub level: usize,
    pub codewords: Array2<f64>,
    pub ema_count: Array1<f64>,
    pub ema_sum: Array2<f64>,
    /// Consecutive epochs without a single assignment, per codeword.
    pub idle_epochs: Vec<usize>,
    used_this_epoch: Vec<bool>,
}

impl Codebook {
    pub fn new(level: usize, codewords: Array2<f64>) -> Result<Self> {
        let k = codewords.nrows();
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs at least two codewords, got {k}"
            )));
        }
        if codewords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("codebook level {level}")));
        }
        Ok(Self {
            level,
            ema_count: Array1::ones(k),
            ema_sum: codewords.clone(),
            codewords,
            idle_epochs: vec![0; k],
            used_this_epoch: vec![false; k],
        })
    }

    pub fn size(&self) -> usize {
        self.codewords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.ncols()
    }

    /// Index of the nearest codeword by squared Euclidean distance, lowest index on ties.
    pub fn nearest(&self, r: ArrayView1<f64>) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (k, e) in self.codewords.rows().into_iter().enumerate() {
            let dist: f64 = r.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best = k;
                best_dist = dist;
            }
        }
        best
    }

    /// Moves the running statistics toward this batch's assignments with decay
    /// `gamma`. Codewords that received no input keep their current value.
    pub fn ema_update(
        &mut self,
        assignments: &[usize],
        inputs: ArrayView2<f64>,
        gamma: f64,
    ) -> Result<()> {
        if assignments.len() != inputs.nrows() {
            return Err(Error::DimensionMismatch {
                expected: assignments.len(),
                got: inputs.nrows(),
            });
        }
        if inputs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: inputs.ncols(),
            });
        }
        let k = self.size();
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, self.dim()));
        for (&a, row) in assignments.iter().zip(inputs.rows()) {
            counts[a] += 1;
            let mut dst = sums.row_mut(a);
            dst += &row;
        }
        for c in 0..k {
            let n = counts[c] as f64;
            self.ema_count[c] = gamma * self.ema_count[c] + (1.0 - gamma) * n;
            let mut sum = self.ema_sum.row_mut(c);
            sum.zip_mut_with(&sums.row(c), |s, &x| *s = gamma * *s + (1.0 - gamma) * x);
            if counts[c] > 0 {
                self.used_this_epoch[c] = true;
                let denom = self.ema_count[c].max(EMA_COUNT_FLOOR);
                let mut word = self.codewords.row_mut(c);
                word.zip_mut_with(&sum, |w, &s| *w = s / denom);
            }
        }
        Ok(())
    }

    /// Closes an epoch: codewords idle for `dead_after` consecutive epochs are
    /// reseeded to a random row of `pool`. Returns the reseeded indices.
    pub fn end_epoch(
        &mut self,
        dead_after: usize,
        pool: ArrayView2<f64>,
        rng: &mut impl Rng,
    ) -> Vec<usize> {
        let mut reseeded = Vec::new();
        for c in 0..self.size() {
            if self.used_this_epoch[c] {
                self.idle_epochs[c] = 0;
            } else {
                self.idle_epochs[c] += 1;
            }
            self.used_this_epoch[c] = false;
            if dead_after > 0 && self.idle_epochs[c] >= dead_after && pool.nrows() > 0 {
                let row = pool.row(rng.random_range(0..pool.nrows()));
                self.codewords.row_mut(c).assign(&row);
                self.ema_sum.row_mut(c).assign(&row);
                self.ema_count[c] = 1.0;
                self.idle_epochs[c] = 0;
                reseeded.push(c);
            }
        }
        reseeded
    }
}
