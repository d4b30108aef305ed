//! Dense affine layer `y = W x + b` with a cache-blocked CPU kernel.
//!
//! Used for the preconditioning branch, the MLP baseline, the teacher network,
//! and as the same-shape reference in throughput benchmarks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{uniform_sym, StreamRng};
use crate::tensor::Matrix;

const ROW_BLOCK: usize = 64;
const IN_BLOCK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    n_in: usize,
    n_out: usize,
    /// `[n_out][n_in]`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub d_input: Matrix,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weight: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    /// Fan-in uniform initialization: weights and bias from `U(-1/sqrt(n_in), 1/sqrt(n_in))`.
    pub fn init_uniform(n_in: usize, n_out: usize, rng: &mut StreamRng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let weight = (0..n_in * n_out).map(|_| uniform_sym(rng, bound)).collect();
        let bias = (0..n_out).map(|_| uniform_sym(rng, bound)).collect();
        Self {
            n_in,
            n_out,
            weight,
            bias,
        }
    }

    pub fn from_parts(n_in: usize, n_out: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != n_in * n_out || bias.len() != n_out {
            return Err(Error::Shape(format!(
                "linear {n_in}->{n_out} needs {} weights and {n_out} biases, got {} and {}",
                n_in * n_out,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            n_in,
            n_out,
            weight,
            bias,
        })
    }

    #[inline]
    pub fn n_in(&self) -> usize {
        self.n_in
    }

    #[inline]
    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Weight and bias borrowed mutably at the same time.
    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight, &mut self.bias)
    }

    #[inline]
    pub fn w(&self, out: usize, inp: usize) -> f64 {
        self.weight[out * self.n_in + inp]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.n_in {
            return Err(Error::Shape(format!(
                "linear expects width {}, got {}",
                self.n_in,
                x.cols()
            )));
        }
        Ok(())
    }

    /// `X W^T + b`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut out = Matrix::zeros(x.rows(), self.n_out);
        let wt = transpose(&self.weight, self.n_out, self.n_in);
        let (n_in, n_out) = (self.n_in, self.n_out);
        out.as_mut_slice()
            .par_chunks_mut(ROW_BLOCK * n_out)
            .zip(x.as_slice().par_chunks(ROW_BLOCK * n_in))
            .for_each(|(y, xb)| {
                let rows = xb.len() / n_in;
                for r in 0..rows {
                    y[r * n_out..(r + 1) * n_out].copy_from_slice(&self.bias);
                }
                for i0 in (0..n_in).step_by(IN_BLOCK) {
                    let i1 = (i0 + IN_BLOCK).min(n_in);
                    for r in 0..rows {
                        let xr = &xb[r * n_in..(r + 1) * n_in];
                        let yr = &mut y[r * n_out..(r + 1) * n_out];
                        for i in i0..i1 {
                            let xv = xr[i];
                            let wrow = &wt[i * n_out..(i + 1) * n_out];
                            for (acc, &wv) in yr.iter_mut().zip(wrow) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            });
        Ok(out)
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
        self.check_input(x)?;
        if dy.cols() != self.n_out || dy.rows() != x.rows() {
            return Err(Error::Shape(format!(
                "linear backward: dY is {}x{}, expected {}x{}",
                dy.rows(),
                dy.cols(),
                x.rows(),
                self.n_out
            )));
        }
        let (n_in, n_out) = (self.n_in, self.n_out);
        let mut d_weight = vec![0.0; n_in * n_out];
        let mut d_bias = vec![0.0; n_out];
        for r in 0..x.rows() {
            let xr = x.row(r);
            let dyr = dy.row(r);
            for (o, &g) in dyr.iter().enumerate() {
                d_bias[o] += g;
                if g != 0.0 {
                    let dw = &mut d_weight[o * n_in..(o + 1) * n_in];
                    for (acc, &xv) in dw.iter_mut().zip(xr) {
                        *acc += g * xv;
                    }
                }
            }
        }
        let mut d_input = Matrix::zeros(x.rows(), n_in);
        d_input
            .as_mut_slice()
            .par_chunks_mut(n_in)
            .zip(dy.as_slice().par_chunks(n_out))
            .for_each(|(dx, dyr)| {
                for (o, &g) in dyr.iter().enumerate() {
                    if g != 0.0 {
                        let wrow = &self.weight[o * n_in..(o + 1) * n_in];
                        for (acc, &wv) in dx.iter_mut().zip(wrow) {
                            *acc += g * wv;
                        }
                    }
                }
            });
        Ok(LinearGrads {
            d_weight,
            d_bias,
            d_input,
        })
    }
}

fn transpose(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}
