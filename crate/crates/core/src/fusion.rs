//! Inference-time absorption of preconditioning branches and batch norms into
//! the coefficient tensor.
//!
//! A linear function `w1 x1 + w2 x2` is exactly representable on any grid, and
//! `w1 ReLU(x1) + w2 ReLU(x2)` is exactly representable when 0 is a grid node,
//! i.e. when `G` is even. A per-output affine map after the layer (batch norm in
//! inference mode) scales every coefficient feeding that output and shifts its
//! constant, which is spread evenly over the `n_in/2` functions of the output.

use crate::batchnorm::BatchNorm;
use crate::error::{Error, Result};
use crate::layer::LmKanLayer;
use crate::linear::Linear;
use crate::precond::{PrecondBlock, PrecondMode};

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Folds the linear branch into the coefficients; `node_map` is applied to the
/// grid points before weighting (ReLU or identity).
fn absorb_branch(block: &PrecondBlock, node_map: impl Fn(f64) -> f64) -> LmKanLayer {
    let layer = &block.layer;
    let lin = block.linear.as_ref().expect("branch present");
    let gamma = layer.gamma();
    let half = layer.pairs();
    let n_out = layer.n_out();
    let nodes = layer.grid().nodes();
    let mapped: Vec<f64> = layer.grid().points().iter().map(|&p| node_map(p)).collect();
    let mut fused = layer.clone();
    let src = layer.params();
    let dst = fused.params_mut();
    for i1 in 0..nodes {
        for i2 in 0..nodes {
            for p in 0..half {
                for q in 0..n_out {
                    let k = ((i1 * nodes + i2) * half + p) * n_out + q;
                    let branch = lin.w(q, 2 * p) * mapped[i1]
                        + lin.w(q, 2 * p + 1) * mapped[i2]
                        + lin.bias()[q] / half as f64;
                    dst[k] = gamma * src[k] + branch;
                }
            }
        }
    }
    fused.set_gamma(1.0);
    fused
}

/// Absorbs `gamma * lmKAN(x) + W ReLU(x) + b` into one pure lmKAN layer.
///
/// Requires mode `relu_first` and an even number of grid intervals.
pub fn fuse_relu_first(block: &PrecondBlock) -> Result<LmKanLayer> {
    match block.mode() {
        PrecondMode::ReluFirst => {}
        PrecondMode::ReluLast => return Err(Error::UnsupportedMode("relu_last".into())),
        other => {
            return Err(Error::Fusion(format!(
                "fuse_relu_first expects a relu_first block, got '{other}'"
            )))
        }
    }
    let g = block.layer.grid().intervals();
    if g % 2 != 0 {
        return Err(Error::Fusion(format!(
            "ReLU is only representable when 0 is a grid node; G={g} is odd"
        )));
    }
    Ok(absorb_branch(block, relu))
}

/// Absorbs any fusable block into a pure layer with `gamma = 1`.
///
/// `relu_first` needs even `G`; `linear` and `none` fuse for any `G`;
/// `relu_last` cannot be fused.
pub fn fuse_block(block: &PrecondBlock) -> Result<LmKanLayer> {
    match block.mode() {
        PrecondMode::ReluFirst => fuse_relu_first(block),
        PrecondMode::Linear => Ok(absorb_branch(block, |v| v)),
        PrecondMode::ReluLast => Err(Error::UnsupportedMode("relu_last".into())),
        PrecondMode::None => Ok(absorb_gamma(&block.layer)),
    }
}

/// Copy of `layer` with `gamma` multiplied into the coefficients.
pub fn absorb_gamma(layer: &LmKanLayer) -> LmKanLayer {
    let mut out = layer.clone();
    if layer.gamma() != 1.0 {
        let g = layer.gamma();
        out.params_mut().iter_mut().for_each(|v| *v *= g);
        out.set_gamma(1.0);
    }
    out
}

/// Per-output `(scale, shift)` such that `bn(y) = scale * y + shift` in
/// inference mode.
fn bn_affine(bn: &BatchNorm, dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if bn.dim() != dim {
        return Err(Error::Shape(format!(
            "batch norm over {} features cannot follow an output of width {dim}",
            bn.dim()
        )));
    }
    if !bn.state.is_populated() {
        return Err(Error::BatchNorm(
            "running statistics were never populated; run training batches or set them explicitly".into(),
        ));
    }
    let s = bn.state.inference_scale();
    let mut scale = Vec::with_capacity(dim);
    let mut shift = Vec::with_capacity(dim);
    for q in 0..dim {
        let (a, b) = match &bn.affine {
            Some(af) => (af.weight[q], af.bias[q]),
            None => (1.0, 0.0),
        };
        scale.push(a / s[q]);
        shift.push(b - a * bn.state.running_mean[q] / s[q]);
    }
    Ok((scale, shift))
}

/// Absorbs an inference-mode batch norm that follows `layer`.
pub fn fuse_output_batchnorm(layer: &LmKanLayer, bn: &BatchNorm) -> Result<LmKanLayer> {
    let (scale, shift) = bn_affine(bn, layer.n_out())?;
    let gamma = layer.gamma();
    let half = layer.pairs();
    let n_out = layer.n_out();
    let mut out = layer.clone();
    for (k, v) in out.params_mut().iter_mut().enumerate() {
        let q = k % n_out;
        *v = gamma * *v * scale[q] + shift[q] / half as f64;
    }
    out.set_gamma(1.0);
    Ok(out)
}

/// ReLU-last blocks keep their branch; only `gamma` and a following batch norm
/// (without affine parameters) are absorbed. The branch is rescaled inside the
/// ReLU, which is valid because the batch-norm scale is positive.
pub fn absorb_into_relu_last(block: &PrecondBlock, bn: Option<&BatchNorm>) -> Result<PrecondBlock> {
    if block.mode() != PrecondMode::ReluLast {
        return Err(Error::Fusion(format!(
            "expected a relu_last block, got '{}'",
            block.mode()
        )));
    }
    let lin = block.linear.as_ref().expect("relu_last has a branch");
    let Some(bn) = bn else {
        return PrecondBlock::new(absorb_gamma(&block.layer), Some(lin.clone()), PrecondMode::ReluLast);
    };
    if bn.affine.is_some() {
        return Err(Error::Fusion(
            "affine batch norm cannot be moved inside a ReLU branch".into(),
        ));
    }
    let layer = fuse_output_batchnorm(&block.layer, bn)?;
    let s = bn.state.inference_scale();
    let mut weight = lin.weight().to_vec();
    let n_in = lin.n_in();
    for (k, w) in weight.iter_mut().enumerate() {
        *w /= s[k / n_in];
    }
    let bias = lin.bias().iter().zip(&s).map(|(b, s)| b / s).collect();
    let lin = Linear::from_parts(n_in, lin.n_out(), weight, bias)?;
    PrecondBlock::new(layer, Some(lin), PrecondMode::ReluLast)
}

/// Folds a batch norm that follows a dense layer into its weights and bias.
pub fn fuse_linear_batchnorm(linear: &Linear, bn: &BatchNorm) -> Result<Linear> {
    let (scale, shift) = bn_affine(bn, linear.n_out())?;
    let n_in = linear.n_in();
    let mut weight = linear.weight().to_vec();
    for (k, w) in weight.iter_mut().enumerate() {
        *w *= scale[k / n_in];
    }
    let bias = linear
        .bias()
        .iter()
        .enumerate()
        .map(|(q, b)| b * scale[q] + shift[q])
        .collect();
    Linear::from_parts(n_in, linear.n_out(), weight, bias)
}
