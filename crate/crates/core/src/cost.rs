//! Inference cost and parameter accounting.
//!
//! Costs are counted as fused multiply-adds of the dominant `O(N^2)` term, the
//! same convention for lookup layers and dense layers.

use crate::error::{Error, Result};

/// Main-term multiply-adds of a `d`-dimensional lookup layer with order-`k`
/// B-splines: `(k^d / d) * n_in * n_out`.
///
/// Each of the `n_in / d` x `n_out` functions touches `k^d` coefficients.
pub fn flops_main_term(n_in: usize, n_out: usize, d: u32, k: u32) -> Result<u64> {
    if d == 0 {
        return Err(Error::Config("function dimension d must be at least 1".into()));
    }
    if k < 2 {
        return Err(Error::Config("spline order k must be at least 2".into()));
    }
    if n_in % d as usize != 0 {
        return Err(Error::Config(format!(
            "input width {n_in} is not divisible by function dimension {d}"
        )));
    }
    let functions = (n_in / d as usize) as u64 * n_out as u64;
    Ok(functions * (k as u64).pow(d))
}

/// Main-term multiply-adds of a dense layer of the same shape.
pub fn flops_linear(n_in: usize, n_out: usize) -> u64 {
    n_in as u64 * n_out as u64
}

/// Coefficients of a 2D lookup layer: `(G+1)^2 * (n_in/2) * n_out`.
pub fn param_count(n_in: usize, n_out: usize, g: usize) -> u64 {
    ((g + 1) * (g + 1)) as u64 * (n_in / 2) as u64 * n_out as u64
}

/// Parameters of a 2D lookup layer relative to a bias-free dense layer of the
/// same shape: `(G+1)^2 / 2`.
pub fn param_ratio_vs_linear(g: usize) -> f64 {
    ((g + 1) * (g + 1)) as f64 / 2.0
}

/// Main-term cost of a chain of layers with the given `(n_in, n_out)` dims.
pub fn chain_flops(dims: &[(usize, usize)], per_layer: impl Fn(usize, usize) -> u64) -> u64 {
    dims.iter().map(|&(a, b)| per_layer(a, b)).sum()
}

/// Main-term cost of a dense chain `in -> h (x hidden_layers) -> out`.
pub fn mlp_flops(in_dim: usize, hidden: usize, out_dim: usize, hidden_layers: usize) -> u64 {
    crate::model::layer_dims(in_dim, hidden, out_dim, hidden_layers)
        .iter()
        .map(|&(a, b)| flops_linear(a, b))
        .sum()
}

/// Hidden width whose dense-chain cost is closest to `target` (smaller width on ties).
pub fn matched_mlp_width(target: u64, in_dim: usize, out_dim: usize, hidden_layers: usize) -> usize {
    let mut best = (u64::MAX, 1);
    let mut h = 1;
    loop {
        let f = mlp_flops(in_dim, h, out_dim, hidden_layers);
        let d = f.abs_diff(target);
        if d < best.0 {
            best = (d, h);
        }
        if f > target {
            return best.1;
        }
        h += 1;
    }
}
