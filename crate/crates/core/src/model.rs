//! Sequential models built from lmKAN blocks and dense blocks.
//!
//! The lmKAN student stacks `lmKAN -> BatchNorm(affine=false)` blocks with no
//! activation functions in between; the MLP baseline stacks
//! `Linear -> BatchNorm(affine=true) -> ReLU`. Both end with a bare layer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::batchnorm::{BatchNorm, BatchNormCache};
use crate::cost;
use crate::error::{Error, Result};
use crate::fusion;
use crate::layer::LmKanLayer;
use crate::linear::Linear;
use crate::precond::{PrecondBlock, PrecondCache, PrecondMode};
use crate::rng::{stream, Stream};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation input `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    /// Standalone normalization (optional input standardization).
    Norm(BatchNorm),
    LmKan {
        block: PrecondBlock,
        norm: Option<BatchNorm>,
    },
    Dense {
        linear: Linear,
        norm: Option<BatchNorm>,
        activation: Activation,
    },
}

impl Block {
    pub fn n_in(&self) -> usize {
        match self {
            Block::Norm(bn) => bn.dim(),
            Block::LmKan { block, .. } => block.n_in(),
            Block::Dense { linear, .. } => linear.n_in(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Block::Norm(bn) => bn.dim(),
            Block::LmKan { block, .. } => block.n_out(),
            Block::Dense { linear, .. } => linear.n_out(),
        }
    }
}

/// Architecture of an lmKAN student.
#[derive(Debug, Clone, PartialEq)]
pub struct LmKanSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub hidden_layers: usize,
    pub grid: usize,
    pub precond: PrecondMode,
    pub init_scale: Option<f64>,
    /// Prepend an affine-free batch norm to the input.
    pub input_norm: bool,
    pub seed: u64,
}

/// Architecture of an MLP (baseline student or teacher).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    blocks: Vec<Block>,
}

enum BlockTape {
    Norm(BatchNormCache),
    LmKan {
        input: Matrix,
        precond: PrecondCache,
        norm: Option<BatchNormCache>,
    },
    Dense {
        input: Matrix,
        norm: Option<BatchNormCache>,
        pre_act: Matrix,
        post_act: Matrix,
    },
}

/// Intermediates of a training-mode forward pass.
pub struct Tape {
    blocks: Vec<BlockTape>,
}

/// What a parameter group holds, in [`Model::params`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// lmKAN coefficient tensor of the given block.
    Coefficients { block: usize },
    Weight,
    Bias,
    NormWeight,
    NormBias,
}

impl Model {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        for (k, w) in blocks.windows(2).enumerate() {
            if w[0].n_out() != w[1].n_in() {
                return Err(Error::Shape(format!(
                    "block {k} outputs {} features but block {} expects {}",
                    w[0].n_out(),
                    k + 1,
                    w[1].n_in()
                )));
            }
        }
        if blocks.is_empty() {
            return Err(Error::Config("a model needs at least one block".into()));
        }
        Ok(Self { blocks })
    }

    /// lmKAN student: `hidden_layers` blocks of `lmKAN -> BatchNorm(affine=false)`
    /// and a final bare lmKAN block, all with `gamma = 0`.
    pub fn lmkan(spec: &LmKanSpec) -> Result<Self> {
        for (name, v) in [("in_dim", spec.in_dim), ("hidden_dim", spec.hidden_dim)] {
            if v == 0 || v % 2 != 0 {
                return Err(Error::Config(format!("{name} must be even and positive, got {v}")));
            }
        }
        let mut rng = stream(spec.seed, Stream::Init);
        let dims = layer_dims(spec.in_dim, spec.hidden_dim, spec.out_dim, spec.hidden_layers);
        let last = dims.len() - 1;
        let mut blocks = Vec::with_capacity(dims.len() + 1);
        if spec.input_norm {
            blocks.push(Block::Norm(BatchNorm::plain(spec.in_dim)));
        }
        for (k, &(n_in, n_out)) in dims.iter().enumerate() {
            let mut layer = LmKanLayer::zeros(n_in, n_out, spec.grid)?;
            layer.randomize(&mut rng, spec.init_scale);
            layer.set_gamma(0.0);
            let mode = match spec.precond {
                PrecondMode::ReluFirst if k == 0 => PrecondMode::Linear,
                PrecondMode::ReluLast if k == last => PrecondMode::Linear,
                m => m,
            };
            let linear = mode
                .has_branch()
                .then(|| Linear::init_uniform(n_in, n_out, &mut rng));
            let block = PrecondBlock::new(layer, linear, mode)?;
            let norm = (k != last).then(|| BatchNorm::plain(n_out));
            blocks.push(Block::LmKan { block, norm });
        }
        Self::new(blocks)
    }

    /// Dense network: `hidden_layers` blocks of `Linear -> [BatchNorm] -> act`
    /// and a final linear layer.
    pub fn mlp(spec: &MlpSpec) -> Result<Self> {
        if spec.in_dim == 0 || spec.hidden_dim == 0 || spec.out_dim == 0 {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        let mut rng = stream(spec.seed, Stream::Init);
        let dims = layer_dims(spec.in_dim, spec.hidden_dim, spec.out_dim, spec.hidden_layers);
        let last = dims.len() - 1;
        let blocks = dims
            .iter()
            .enumerate()
            .map(|(k, &(n_in, n_out))| {
                let linear = Linear::init_uniform(n_in, n_out, &mut rng);
                if k == last {
                    Block::Dense {
                        linear,
                        norm: None,
                        activation: Activation::Identity,
                    }
                } else {
                    Block::Dense {
                        linear,
                        norm: spec.batch_norm.then(|| BatchNorm::affine(n_out)),
                        activation: spec.activation,
                    }
                }
            })
            .collect();
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].n_in()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].n_out()
    }

    pub fn lmkan_layers(&self) -> impl Iterator<Item = &LmKanLayer> {
        self.blocks.iter().filter_map(|b| match b {
            Block::LmKan { block, .. } => Some(&block.layer),
            _ => None,
        })
    }

    pub fn is_lmkan(&self) -> bool {
        self.lmkan_layers().next().is_some()
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        for b in &mut self.blocks {
            if let Block::LmKan { block, .. } = b {
                block.layer.set_gamma(gamma);
            }
        }
    }

    pub fn set_tiles(&mut self, tiles: crate::layer::TileConfig) {
        for b in &mut self.blocks {
            if let Block::LmKan { block, .. } = b {
                block.layer.set_tiles(tiles);
            }
        }
    }

    /// Trainable parameter count (lmKAN coefficients, dense weights and biases,
    /// batch-norm affine parameters).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Main-term fused multiply-adds per row for the model as it stands: a
    /// lookup layer costs `2 n_in n_out`, a linear branch or dense layer
    /// `n_in n_out`.
    pub fn main_term_flops(&self) -> u64 {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Norm(_) => 0,
                Block::LmKan { block, .. } => {
                    let base = cost::flops_main_term(block.n_in(), block.n_out(), 2, 2)
                        .expect("even widths");
                    let branch = if block.mode().has_branch() {
                        (block.n_in() * block.n_out()) as u64
                    } else {
                        0
                    };
                    base + branch
                }
                Block::Dense { linear, .. } => (linear.n_in() * linear.n_out()) as u64,
            })
            .sum()
    }

    /// Main-term cost after fusion: branches that fusion absorbs are not
    /// counted; `relu_last` branches are.
    pub fn fused_main_term_flops(&self) -> u64 {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::LmKan { block, .. } => {
                    let base = cost::flops_main_term(block.n_in(), block.n_out(), 2, 2)
                        .expect("even widths");
                    match block.mode() {
                        PrecondMode::ReluLast => base + (block.n_in() * block.n_out()) as u64,
                        _ => base,
                    }
                }
                Block::Norm(_) => 0,
                Block::Dense { linear, .. } => (linear.n_in() * linear.n_out()) as u64,
            })
            .sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "model expects width {}, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass (batch norms use running statistics).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = match b {
                Block::Norm(bn) => bn.infer(&h)?,
                Block::LmKan { block, norm } => {
                    let y = block.forward(&h)?;
                    match norm {
                        Some(bn) => bn.infer(&y)?,
                        None => y,
                    }
                }
                Block::Dense {
                    linear,
                    norm,
                    activation,
                } => {
                    let mut z = linear.forward(&h)?;
                    if let Some(bn) = norm {
                        z = bn.infer(&z)?;
                    }
                    let act = *activation;
                    if act != Activation::Identity {
                        z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
                    }
                    z
                }
            };
        }
        Ok(h)
    }

    /// Training-mode forward pass: batch norms use batch statistics and update
    /// their running statistics.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut tape = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            match b {
                Block::Norm(bn) => {
                    let (y, cache) = bn.apply_cached(&h, true)?;
                    tape.push(BlockTape::Norm(cache.expect("training cache")));
                    h = y;
                }
                Block::LmKan { block, norm } => {
                    let (y, precond) = block.forward_cached(&h)?;
                    let (y, norm_cache) = match norm {
                        Some(bn) => {
                            let (y, c) = bn.apply_cached(&y, true)?;
                            (y, c)
                        }
                        None => (y, None),
                    };
                    tape.push(BlockTape::LmKan {
                        input: std::mem::replace(&mut h, y),
                        precond,
                        norm: norm_cache,
                    });
                }
                Block::Dense {
                    linear,
                    norm,
                    activation,
                } => {
                    let z = linear.forward(&h)?;
                    let (z, norm_cache) = match norm {
                        Some(bn) => bn.apply_cached(&z, true)?,
                        None => (z, None),
                    };
                    let act = *activation;
                    let a = z.map(|v| act.apply(v));
                    tape.push(BlockTape::Dense {
                        input: std::mem::replace(&mut h, a.clone()),
                        norm: norm_cache,
                        pre_act: z,
                        post_act: a,
                    });
                }
            }
        }
        Ok((h, Tape { blocks: tape }))
    }

    /// Parameter groups in a fixed order; gradients use the same order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Norm(bn) => push_affine(&mut out, bn),
                Block::LmKan { block, norm } => {
                    out.push(block.layer.params());
                    if let Some(lin) = &block.linear {
                        out.push(lin.weight());
                        out.push(lin.bias());
                    }
                    if let Some(bn) = norm {
                        push_affine(&mut out, bn);
                    }
                }
                Block::Dense { linear, norm, .. } => {
                    out.push(linear.weight());
                    out.push(linear.bias());
                    if let Some(bn) = norm {
                        push_affine(&mut out, bn);
                    }
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            match b {
                Block::Norm(bn) => push_affine_mut(&mut out, bn),
                Block::LmKan { block, norm } => {
                    out.push(block.layer.params_mut());
                    if let Some(lin) = &mut block.linear {
                        // Split borrows of weight and bias.
                        let (w, bias) = split_linear(lin);
                        out.push(w);
                        out.push(bias);
                    }
                    if let Some(bn) = norm {
                        push_affine_mut(&mut out, bn);
                    }
                }
                Block::Dense { linear, norm, .. } => {
                    let (w, bias) = split_linear(linear);
                    out.push(w);
                    out.push(bias);
                    if let Some(bn) = norm {
                        push_affine_mut(&mut out, bn);
                    }
                }
            }
        }
        out
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = Vec::new();
        let norm_kinds = |out: &mut Vec<ParamKind>, bn: &BatchNorm| {
            if bn.affine.is_some() {
                out.push(ParamKind::NormWeight);
                out.push(ParamKind::NormBias);
            }
        };
        for (k, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Norm(bn) => norm_kinds(&mut out, bn),
                Block::LmKan { block, norm } => {
                    out.push(ParamKind::Coefficients { block: k });
                    if block.linear.is_some() {
                        out.push(ParamKind::Weight);
                        out.push(ParamKind::Bias);
                    }
                    if let Some(bn) = norm {
                        norm_kinds(&mut out, bn);
                    }
                }
                Block::Dense { norm, .. } => {
                    out.push(ParamKind::Weight);
                    out.push(ParamKind::Bias);
                    if let Some(bn) = norm {
                        norm_kinds(&mut out, bn);
                    }
                }
            }
        }
        out
    }

    /// Gradients of `sum(dY * output)` for every parameter group, in
    /// [`Model::params`] order.
    pub fn backward(&self, tape: &Tape, dy: &Matrix) -> Result<Vec<Vec<f64>>> {
        if tape.blocks.len() != self.blocks.len() {
            return Err(Error::Shape("tape does not belong to this model".into()));
        }
        let mut per_block: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.blocks.len());
        let mut g = dy.clone();
        for (b, t) in self.blocks.iter().zip(&tape.blocks).rev() {
            let mut groups = Vec::new();
            match (b, t) {
                (Block::Norm(bn), BlockTape::Norm(cache)) => {
                    let ng = bn.backward(cache, &g);
                    push_norm_grads(&mut groups, ng.d_weight, ng.d_bias);
                    g = ng.d_input;
                }
                (
                    Block::LmKan { block, norm },
                    BlockTape::LmKan {
                        input,
                        precond,
                        norm: norm_cache,
                    },
                ) => {
                    let mut norm_groups = Vec::new();
                    if let (Some(bn), Some(cache)) = (norm, norm_cache) {
                        let ng = bn.backward(cache, &g);
                        push_norm_grads(&mut norm_groups, ng.d_weight, ng.d_bias);
                        g = ng.d_input;
                    }
                    let pg = block.backward(input, precond, &g)?;
                    groups.push(pg.layer.d_params);
                    if let Some(lg) = pg.linear {
                        groups.push(lg.d_weight);
                        groups.push(lg.d_bias);
                    }
                    groups.extend(norm_groups);
                    g = pg.d_input;
                }
                (
                    Block::Dense {
                        linear,
                        norm,
                        activation,
                    },
                    BlockTape::Dense {
                        input,
                        norm: norm_cache,
                        pre_act,
                        post_act,
                    },
                ) => {
                    let act = *activation;
                    let mut dz = g.clone();
                    for ((d, &z), &a) in dz
                        .as_mut_slice()
                        .iter_mut()
                        .zip(pre_act.as_slice())
                        .zip(post_act.as_slice())
                    {
                        *d *= act.derivative(z, a);
                    }
                    let mut norm_groups = Vec::new();
                    if let (Some(bn), Some(cache)) = (norm, norm_cache) {
                        let ng = bn.backward(cache, &dz);
                        push_norm_grads(&mut norm_groups, ng.d_weight, ng.d_bias);
                        dz = ng.d_input;
                    }
                    let lg = linear.backward(input, &dz)?;
                    groups.push(lg.d_weight);
                    groups.push(lg.d_bias);
                    groups.extend(norm_groups);
                    g = lg.d_input;
                }
                _ => return Err(Error::Shape("tape does not belong to this model".into())),
            }
            per_block.push(groups);
        }
        per_block.reverse();
        Ok(per_block.into_iter().flatten().collect())
    }

    /// Inference-time rewrite into pure lookup layers (and BN-folded dense
    /// layers). `relu_last` blocks keep their branch with `gamma` and batch norm
    /// absorbed; they are listed in the returned report.
    pub fn fuse(&self) -> Result<(Model, FuseReport)> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut report = FuseReport::default();
        let mut pending_norm: Option<BatchNorm> = None;
        for (k, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Norm(bn) => {
                    // Input standardization is an affine map applied before a
                    // layer; it is kept as is.
                    if let Some(prev) = pending_norm.take() {
                        blocks.push(Block::Norm(prev));
                    }
                    pending_norm = Some(bn.clone());
                }
                Block::LmKan { block, norm } => {
                    if let Some(prev) = pending_norm.take() {
                        blocks.push(Block::Norm(prev));
                    }
                    match block.mode() {
                        PrecondMode::ReluLast => {
                            let absorbed = fusion::absorb_into_relu_last(block, norm.as_ref())?;
                            report.unfused_relu_last.push(k);
                            blocks.push(Block::LmKan {
                                block: absorbed,
                                norm: None,
                            });
                        }
                        _ => {
                            let mut layer = fusion::fuse_block(block)?;
                            if let Some(bn) = norm {
                                layer = fusion::fuse_output_batchnorm(&layer, bn)?;
                            }
                            blocks.push(Block::LmKan {
                                block: PrecondBlock::pure(layer),
                                norm: None,
                            });
                        }
                    }
                }
                Block::Dense {
                    linear,
                    norm,
                    activation,
                } => {
                    if let Some(prev) = pending_norm.take() {
                        blocks.push(Block::Norm(prev));
                    }
                    let linear = match norm {
                        Some(bn) => fusion::fuse_linear_batchnorm(linear, bn)?,
                        None => linear.clone(),
                    };
                    blocks.push(Block::Dense {
                        linear,
                        norm: None,
                        activation: *activation,
                    });
                }
            }
        }
        if let Some(prev) = pending_norm {
            blocks.push(Block::Norm(prev));
        }
        Ok((Model::new(blocks)?, report))
    }

    /// True when every lmKAN block is a pure layer with `gamma = 1` and no
    /// batch norm follows any layer.
    pub fn is_fused(&self) -> bool {
        self.blocks.iter().all(|b| match b {
            Block::Norm(_) => true,
            Block::LmKan { block, norm } => {
                block.mode() == PrecondMode::None && block.layer.gamma() == 1.0 && norm.is_none()
            }
            Block::Dense { norm, .. } => norm.is_none(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FuseReport {
    /// Block indices that kept a ReLU-last branch.
    pub unfused_relu_last: Vec<usize>,
}

/// `(n_in, n_out)` of every layer for a chain with `hidden_layers` hidden layers.
pub fn layer_dims(in_dim: usize, hidden: usize, out_dim: usize, hidden_layers: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(hidden_layers + 1);
    let mut prev = in_dim;
    for _ in 0..hidden_layers {
        dims.push((prev, hidden));
        prev = hidden;
    }
    dims.push((prev, out_dim));
    dims
}

fn push_affine<'a>(out: &mut Vec<&'a [f64]>, bn: &'a BatchNorm) {
    if let Some(a) = &bn.affine {
        out.push(&a.weight);
        out.push(&a.bias);
    }
}

fn push_affine_mut<'a>(out: &mut Vec<&'a mut [f64]>, bn: &'a mut BatchNorm) {
    if let Some(a) = &mut bn.affine {
        out.push(&mut a.weight);
        out.push(&mut a.bias);
    }
}

fn push_norm_grads(out: &mut Vec<Vec<f64>>, w: Option<Vec<f64>>, b: Option<Vec<f64>>) {
    if let (Some(w), Some(b)) = (w, b) {
        out.push(w);
        out.push(b);
    }
}

fn split_linear(lin: &mut Linear) -> (&mut [f64], &mut [f64]) {
    lin.parts_mut()
}
