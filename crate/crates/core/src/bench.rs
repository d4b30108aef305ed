//! Inference throughput measurement.
//!
//! Each configuration runs `warmup` discarded passes and `timed` recorded
//! passes over one batch of standard-normal rows; the median pass time gives
//! the throughput. A dense model of the same layer shapes is timed the same
//! way as the reference.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hessian::plane_fit;
use crate::linear::Linear;
use crate::model::{Activation, Block, Model};
use crate::precond::PrecondMode;
use crate::rng::{normal_matrix, stream, Stream};
use crate::tensor::Matrix;

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_TIMED: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub warmup: usize,
    pub timed: usize,
    pub run_secs: Vec<f64>,
    pub median_rows_per_sec: f64,
    pub flops: u64,
    pub params: usize,
    pub reference_run_secs: Vec<f64>,
    pub reference_rows_per_sec: f64,
    /// Reference throughput over model throughput.
    pub slowdown: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str =
        "batch,warmup,timed,median_secs,median_rows_per_sec,flops,params,reference_rows_per_sec,slowdown";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{},{},{:e},{:.4}",
            self.batch,
            self.warmup,
            self.timed,
            median(&self.run_secs),
            self.median_rows_per_sec,
            self.flops,
            self.params,
            self.reference_rows_per_sec,
            self.slowdown
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-pass wall-clock seconds of `model.forward(x)`.
pub fn time_forward(model: &Model, x: &Matrix, warmup: usize, timed: usize) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        std::hint::black_box(model.forward(x)?);
    }
    let mut secs = Vec::with_capacity(timed);
    for _ in 0..timed {
        let t0 = Instant::now();
        std::hint::black_box(model.forward(x)?);
        secs.push(t0.elapsed().as_secs_f64());
    }
    Ok(secs)
}

/// Dense model with the layer shapes of `model`. Each lmKAN sheet is replaced
/// by its least-squares plane (scaled by `gamma`), so a model whose sheets are
/// planes and whose blocks carry no ReLU branch maps to an equivalent dense
/// model. ReLU branches are dropped.
pub fn dense_reference(model: &Model) -> Result<Model> {
    let blocks = model
        .blocks()
        .iter()
        .map(|b| -> Result<Block> {
            Ok(match b {
                Block::Norm(bn) => Block::Norm(bn.clone()),
                Block::Dense { .. } => b.clone(),
                Block::LmKan { block, norm } => {
                    let layer = &block.layer;
                    let (n_in, n_out) = (layer.n_in(), layer.n_out());
                    let gamma = layer.gamma();
                    let mut w = vec![0.0; n_in * n_out];
                    let mut bias = vec![0.0; n_out];
                    for p in 0..layer.pairs() {
                        for q in 0..n_out {
                            let (_, [c, a1, a2]) = plane_fit(layer.grid(), &layer.function(p, q))?;
                            w[q * n_in + 2 * p] = gamma * a1;
                            w[q * n_in + 2 * p + 1] = gamma * a2;
                            bias[q] += gamma * c;
                        }
                    }
                    if let (Some(lin), PrecondMode::Linear) = (&block.linear, block.mode()) {
                        for (a, b) in w.iter_mut().zip(lin.weight()) {
                            *a += b;
                        }
                        for (a, b) in bias.iter_mut().zip(lin.bias()) {
                            *a += b;
                        }
                    }
                    Block::Dense {
                        linear: Linear::from_parts(n_in, n_out, w, bias)?,
                        norm: norm.clone(),
                        activation: Activation::Identity,
                    }
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(blocks)
}

/// Benchmarks `model` and its dense reference at one batch size.
pub fn bench_model(model: &Model, batch: usize, warmup: usize, timed: usize, seed: u64) -> Result<BenchReport> {
    if batch == 0 || timed == 0 {
        return Err(Error::Config("batch size and timed runs must be positive".into()));
    }
    let x = normal_matrix(&mut stream(seed, Stream::Bench), batch, model.in_dim());
    let reference = dense_reference(model)?;
    let run_secs = time_forward(model, &x, warmup, timed)?;
    let reference_run_secs = time_forward(&reference, &x, warmup, timed)?;
    let rate = batch as f64 / median(&run_secs);
    let ref_rate = batch as f64 / median(&reference_run_secs);
    Ok(BenchReport {
        batch,
        warmup,
        timed,
        run_secs,
        median_rows_per_sec: rate,
        flops: model.main_term_flops(),
        params: model.param_count(),
        reference_run_secs,
        reference_rows_per_sec: ref_rate,
        slowdown: ref_rate / rate,
    })
}
