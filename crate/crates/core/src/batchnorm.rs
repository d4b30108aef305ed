//! Batch normalization over feature columns.
//!
//! lmKAN blocks use it without affine parameters so that activations entering
//! the next layer stay close to standard normal, which is what the static
//! percentile grid is tuned for. The MLP baseline uses the affine variant.
//!
//! Running variance tracks the unbiased batch variance; normalization in
//! training mode uses the biased one.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Running statistics of an affine-free batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub dim: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    /// Number of training batches folded into the running statistics.
    pub batches_tracked: u64,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            batches_tracked: 0,
        }
    }

    /// State with explicit, already-populated running statistics.
    pub fn with_stats(mean: Vec<f64>, var: Vec<f64>, epsilon: f64) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape(format!(
                "running mean has {} entries, variance {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::BatchNorm("running variance must be nonnegative".into()));
        }
        Ok(Self {
            dim: mean.len(),
            running_mean: mean,
            running_var: var,
            momentum: DEFAULT_MOMENTUM,
            epsilon,
            batches_tracked: 1,
        })
    }

    pub fn is_populated(&self) -> bool {
        self.batches_tracked > 0
    }

    /// `sqrt(running_var + epsilon)` per feature.
    pub fn inference_scale(&self) -> Vec<f64> {
        self.running_var
            .iter()
            .map(|v| (v + self.epsilon).sqrt())
            .collect()
    }
}

/// Per-feature affine transform applied after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub state: BatchNormState,
    pub affine: Option<Affine>,
}

/// Values saved by a training-mode pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub d_input: Matrix,
    pub d_weight: Option<Vec<f64>>,
    pub d_bias: Option<Vec<f64>>,
}

impl BatchNorm {
    pub fn plain(dim: usize) -> Self {
        Self {
            state: BatchNormState::new(dim),
            affine: None,
        }
    }

    pub fn affine(dim: usize) -> Self {
        Self {
            state: BatchNormState::new(dim),
            affine: Some(Affine {
                weight: vec![1.0; dim],
                bias: vec![0.0; dim],
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.state.dim
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.state.dim {
            return Err(Error::Shape(format!(
                "batch norm over {} features got width {}",
                self.state.dim,
                x.cols()
            )));
        }
        Ok(())
    }

    /// Normalizes `x`. In training mode uses batch statistics and updates the
    /// running ones; in inference mode uses the running statistics.
    pub fn apply(&mut self, x: &Matrix, training: bool) -> Result<Matrix> {
        Ok(self.apply_cached(x, training)?.0)
    }

    /// Inference-mode normalization with the running statistics.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let scale = self.state.inference_scale();
        let mut y = x.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.state.running_mean[c]) / scale[c];
            }
        }
        self.apply_affine(&mut y);
        Ok(y)
    }

    pub(crate) fn apply_cached(&mut self, x: &Matrix, training: bool) -> Result<(Matrix, Option<BatchNormCache>)> {
        self.check(x)?;
        let (n, d) = (x.rows(), x.cols());
        if !training {
            return Ok((self.infer(x)?, None));
        }
        if n < 2 {
            return Err(Error::BatchNorm(format!(
                "training mode needs a batch of at least 2 rows, got {n}"
            )));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + self.state.epsilon).sqrt())
            .collect();

        let mut x_hat = Matrix::zeros(n, d);
        for r in 0..n {
            let src = x.row(r);
            let dst = x_hat.row_mut(r);
            for c in 0..d {
                dst[c] = (src[c] - mean[c]) * inv_std[c];
            }
        }

        let mom = self.state.momentum;
        let unbias = n as f64 / (n as f64 - 1.0);
        for c in 0..d {
            self.state.running_mean[c] = (1.0 - mom) * self.state.running_mean[c] + mom * mean[c];
            self.state.running_var[c] = (1.0 - mom) * self.state.running_var[c] + mom * var[c] * unbias;
        }
        self.state.batches_tracked += 1;

        let mut y = x_hat.clone();
        self.apply_affine(&mut y);
        Ok((y, Some(BatchNormCache { x_hat, inv_std })))
    }

    fn apply_affine(&self, y: &mut Matrix) {
        if let Some(a) = &self.affine {
            for r in 0..y.rows() {
                let row = y.row_mut(r);
                for c in 0..row.len() {
                    row[c] = row[c] * a.weight[c] + a.bias[c];
                }
            }
        }
    }

    /// Backward pass of a training-mode application.
    pub(crate) fn backward(&self, cache: &BatchNormCache, dy: &Matrix) -> BatchNormGrads {
        let (n, d) = (dy.rows(), dy.cols());
        let x_hat = &cache.x_hat;
        let (mut d_weight, mut d_bias) = (None, None);
        let mut dxhat = dy.clone();
        if let Some(a) = &self.affine {
            let mut dw = vec![0.0; d];
            let mut db = vec![0.0; d];
            for r in 0..n {
                let g = dy.row(r);
                let xh = x_hat.row(r);
                for c in 0..d {
                    dw[c] += g[c] * xh[c];
                    db[c] += g[c];
                }
            }
            for r in 0..n {
                let row = dxhat.row_mut(r);
                for c in 0..d {
                    row[c] *= a.weight[c];
                }
            }
            d_weight = Some(dw);
            d_bias = Some(db);
        }
        let mut sum = vec![0.0; d];
        let mut sum_xh = vec![0.0; d];
        for r in 0..n {
            let g = dxhat.row(r);
            let xh = x_hat.row(r);
            for c in 0..d {
                sum[c] += g[c];
                sum_xh[c] += g[c] * xh[c];
            }
        }
        let nf = n as f64;
        let mut d_input = Matrix::zeros(n, d);
        for r in 0..n {
            let g = dxhat.row(r);
            let xh = x_hat.row(r);
            let dst = d_input.row_mut(r);
            for c in 0..d {
                dst[c] = cache.inv_std[c] / nf * (nf * g[c] - sum[c] - xh[c] * sum_xh[c]);
            }
        }
        BatchNormGrads {
            d_input,
            d_weight,
            d_bias,
        }
    }
}
