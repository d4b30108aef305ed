//! Independent oracles and measurement suites shared by the integration tests
//! and the acceptance runner. Nothing here calls the fast evaluation paths of
//! the library; grids and interpolation are rebuilt from their definitions.

#![allow(dead_code)]

use std::f64::consts::PI;

use lmkan::batchnorm::BatchNormState;
use lmkan::hessian::{hessian_penalty, hessian_penalty_grad, plane_fit};
use lmkan::io::{decode_model, encode_model, DType};
use lmkan::linear::Linear;
use lmkan::model::Block;
use lmkan::rng::{normal, normal_matrix, stream, Stream, StreamRng};
use lmkan::spline2d::{eval2d, eval2d_dense_oracle, grad2d};
use lmkan::{Activation, Func2D, LmKanLayer, LmKanSpec, Matrix, MlpSpec, Model, PrecondBlock, PrecondMode, SigmaGrid};
use rand::Rng;

/// Grid points from the closed-form inverse sigmoid with mirrored ghosts.
pub fn oracle_points(g: usize) -> Vec<f64> {
    let mut p = vec![0.0; g + 1];
    for k in 1..g {
        let q = k as f64 / g as f64;
        p[k] = if q <= 0.5 { (2.0 * q).ln() } else { -(2.0 * (1.0 - q)).ln() };
    }
    p[0] = p[1] - (p[2] - p[1]);
    p[g] = p[g - 1] + (p[g - 1] - p[g - 2]);
    p
}

/// Interval by linear scan over interior points, plus the local coordinate.
pub fn oracle_cell(p: &[f64], x: f64) -> (usize, f64) {
    let g = p.len() - 1;
    let mut i = 0;
    while i + 1 < g && p[i + 1] <= x {
        i += 1;
    }
    (i, (x - p[i]) / (p[i + 1] - p[i]))
}

/// Bilinear evaluation in local coordinates. Returns the value and the sum of
/// absolute terms, used as the rounding scale for relative comparisons.
pub fn oracle_eval(p: &[f64], coeffs: &[f64], x1: f64, x2: f64) -> (f64, f64) {
    let n = p.len();
    let (i, t) = oracle_cell(p, x1);
    let (j, s) = oracle_cell(p, x2);
    let terms = [
        (1.0 - t) * (1.0 - s) * coeffs[i * n + j],
        t * (1.0 - s) * coeffs[(i + 1) * n + j],
        (1.0 - t) * s * coeffs[i * n + j + 1],
        t * s * coeffs[(i + 1) * n + j + 1],
    ];
    (terms.iter().sum(), terms.iter().map(|v| v.abs()).sum())
}

pub fn cauchy(rng: &mut StreamRng) -> f64 {
    (PI * (rng.random::<f64>() - 0.5)).tan()
}

/// Probe coordinate: mostly normal, with wide, Cauchy, exact-node and far-tail draws.
pub fn probe(rng: &mut StreamRng, points: &[f64]) -> f64 {
    let u: f64 = rng.random();
    if u < 0.5 {
        normal(rng)
    } else if u < 0.7 {
        3.0 * normal(rng)
    } else if u < 0.8 {
        cauchy(rng)
    } else if u < 0.9 {
        points[rng.random_range(0..points.len())]
    } else if u < 0.95 {
        1e3
    } else {
        -1e3
    }
}

pub fn random_sheet(grid: &SigmaGrid, rng: &mut StreamRng) -> Func2D {
    let n = grid.nodes();
    Func2D::from_vec(grid, (0..n * n).map(|_| normal(rng)).collect()).unwrap()
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(b.abs()).max(f64::MIN_POSITIVE)
}

pub struct OracleReport {
    pub eval2d_vs_oracle: f64,
    pub dense_vs_oracle: f64,
    pub forward_vs_oracle: f64,
}

/// Worst relative deviations of `eval2d`, the library dense oracle, and the
/// batched layer forward from the local-coordinate oracle on `n` points.
pub fn oracle_equivalence(g: usize, n: usize, seed: u64) -> OracleReport {
    let grid = SigmaGrid::new(g).unwrap();
    let p = oracle_points(g);
    for (a, b) in grid.points().iter().zip(&p) {
        assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0), "grid point {a} vs {b}");
    }
    let mut rng = stream(seed, Stream::Data);
    let f = random_sheet(&grid, &mut rng);
    let mut worst_eval: f64 = 0.0;
    let mut worst_dense: f64 = 0.0;
    for _ in 0..n {
        let (x1, x2) = (probe(&mut rng, &p), probe(&mut rng, &p));
        let (want, scale) = oracle_eval(&p, f.coeffs(), x1, x2);
        worst_eval = worst_eval.max(rel(eval2d(&grid, &f, x1, x2), want, scale));
        worst_dense = worst_dense.max(rel(eval2d_dense_oracle(&grid, &f, x1, x2), want, scale));
    }

    // Layer with 3 pairs and 5 outputs; both the direct (small batch) and the
    // packed (large batch) kernels are exercised.
    let (n_in, n_out) = (6, 5);
    let mut layer = LmKanLayer::init(n_in, n_out, g, seed ^ 0x5eed, None).unwrap();
    layer.set_gamma(0.7);
    let sheets: Vec<Vec<Func2D>> = (0..n_in / 2)
        .map(|pr| (0..n_out).map(|q| layer.function(pr, q)).collect())
        .collect();
    let mut worst_fwd: f64 = 0.0;
    for rows in [37, n] {
        let x = Matrix::from_fn(rows, n_in, |_, _| probe(&mut rng, &p));
        let y = layer.forward(&x).unwrap();
        for r in 0..rows {
            for q in 0..n_out {
                let (mut want, mut scale) = (0.0, 0.0);
                for (pr, fs) in sheets.iter().enumerate() {
                    let (v, s) = oracle_eval(&p, fs[q].coeffs(), x.get(r, 2 * pr), x.get(r, 2 * pr + 1));
                    want += v;
                    scale += s;
                }
                worst_fwd = worst_fwd.max(rel(y.get(r, q), 0.7 * want, 0.7 * scale));
            }
        }
    }
    OracleReport {
        eval2d_vs_oracle: worst_eval,
        dense_vs_oracle: worst_dense,
        forward_vs_oracle: worst_fwd,
    }
}

pub struct UnityReport {
    /// Max `|sum w - 1|` over standard-normal pairs.
    pub normal_abs: f64,
    /// Max `|sum w - 1|` over Cauchy pairs.
    pub cauchy_abs: f64,
    /// Max `|sum w - 1| / max(1, sum |w|)` over Cauchy pairs.
    pub cauchy_scaled: f64,
}

pub fn partition_of_unity(g: usize, n: usize, seed: u64) -> UnityReport {
    let grid = SigmaGrid::new(g).unwrap();
    let mut rng = stream(seed, Stream::Data);
    let mut rep = UnityReport {
        normal_abs: 0.0,
        cauchy_abs: 0.0,
        cauchy_scaled: 0.0,
    };
    for _ in 0..n {
        let w = grid.preamble(normal(&mut rng), normal(&mut rng)).w;
        rep.normal_abs = rep.normal_abs.max((w.iter().sum::<f64>() - 1.0).abs());
        let w = grid.preamble(cauchy(&mut rng), cauchy(&mut rng)).w;
        let dev = (w.iter().sum::<f64>() - 1.0).abs();
        let mass: f64 = w.iter().map(|v| v.abs()).sum();
        rep.cauchy_abs = rep.cauchy_abs.max(dev);
        rep.cauchy_scaled = rep.cauchy_scaled.max(dev / mass.max(1.0));
    }
    rep
}

pub struct ContinuityReport {
    /// Worst `|f(g - eps) - f(g + eps)| / (1 + max|coeff|)`.
    pub sup_scaled: f64,
    /// Same difference over `1 + |f(g)|` at the node itself.
    pub pointwise: f64,
    /// Jump left after removing the in-cell slope `2 eps f'`.
    pub jump: f64,
}

/// Differences across every interior node on both axes, for random sheets
/// and random cross coordinates, with `eps = 1e-8`.
pub fn continuity(g: usize, trials: usize, seed: u64) -> ContinuityReport {
    let grid = SigmaGrid::new(g).unwrap();
    let mut rng = stream(seed, Stream::Data);
    let eps = 1e-8;
    let mut rep = ContinuityReport {
        sup_scaled: 0.0,
        pointwise: 0.0,
        jump: 0.0,
    };
    for _ in 0..trials {
        let f = random_sheet(&grid, &mut rng);
        let sup = f.coeffs().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for &node in &grid.points()[1..g] {
            let other = 2.0 * normal(&mut rng);
            for axis in 0..2 {
                let at = |x: f64| if axis == 0 { (x, other) } else { (other, x) };
                let (l1, l2) = at(node - eps);
                let (r1, r2) = at(node + eps);
                let (n1, n2) = at(node);
                let (lo, hi) = (eval2d(&grid, &f, l1, l2), eval2d(&grid, &f, r1, r2));
                let d = (lo - hi).abs();
                let fv = eval2d(&grid, &f, n1, n2).abs();
                rep.sup_scaled = rep.sup_scaled.max(d / (1.0 + sup));
                rep.pointwise = rep.pointwise.max(d / (1.0 + fv));
                let slope = |x1: f64, x2: f64| {
                    let gr = grad2d(&grid, &f, x1, x2);
                    if axis == 0 { gr.df_dx1 } else { gr.df_dx2 }
                };
                let left_limit = lo + eps * slope(l1, l2);
                let right_limit = hi - eps * slope(r1, r2);
                rep.jump = rep.jump.max((left_limit - right_limit).abs() / (1.0 + sup));
            }
        }
    }
    rep
}

pub struct LinearReport {
    /// Normal points and points with one coordinate at `+-1e3`, relative to `|f|` terms.
    pub one_tail: f64,
    /// Both coordinates at `+-1e3`, relative to `|f|` terms.
    pub both_tails: f64,
    /// Both coordinates at `+-1e3`, relative to the lookup rounding scale.
    pub both_tails_conditioned: f64,
}

/// Errors of `eval2d` on linear sheets `a x1 + b x2 + c`.
pub fn linear_reproduction(g: usize, trials: usize, seed: u64) -> LinearReport {
    let grid = SigmaGrid::new(g).unwrap();
    let mut rng = stream(seed, Stream::Data);
    let mut rep = LinearReport {
        one_tail: 0.0,
        both_tails: 0.0,
        both_tails_conditioned: 0.0,
    };
    for _ in 0..trials {
        let (a, b, c) = (normal(&mut rng), normal(&mut rng), normal(&mut rng));
        let f = Func2D::from_node_fn(&grid, |x, y| a * x + b * y + c);
        let side = |r: &mut StreamRng| if r.random::<bool>() { 1e3 } else { -1e3 };
        let cases = [
            (normal(&mut rng), normal(&mut rng), false),
            (side(&mut rng), normal(&mut rng), false),
            (normal(&mut rng), side(&mut rng), false),
            (side(&mut rng), 1e3 * (2.0 * rng.random::<f64>() - 1.0), true),
            (side(&mut rng), side(&mut rng), true),
        ];
        for (x1, x2, both) in cases {
            let want = a * x1 + b * x2 + c;
            let err = (eval2d(&grid, &f, x1, x2) - want).abs();
            let rel = err / ((a * x1).abs() + (b * x2).abs() + c.abs()).max(1.0);
            if both {
                rep.both_tails = rep.both_tails.max(rel);
                // Node values carry their own rounding, so each corner is
                // weighted by the magnitude of its terms, not of its sum.
                let pre = grid.preamble(x1, x2);
                let p = grid.points();
                let idx = [(0, 0), (1, 0), (0, 1), (1, 1)];
                let cond: f64 = idx
                    .iter()
                    .zip(pre.w)
                    .map(|(&(d1, d2), w)| {
                        w.abs() * ((a * p[pre.i1 + d1]).abs() + (b * p[pre.i2 + d2]).abs() + c.abs())
                    })
                    .sum();
                rep.both_tails_conditioned = rep.both_tails_conditioned.max(err / cond.max(want.abs()));
            } else {
                rep.one_tail = rep.one_tail.max(rel);
            }
        }
    }
    rep
}

/// Coordinate at least `margin` away from every grid point.
pub fn off_node(rng: &mut StreamRng, points: &[f64], margin: f64) -> f64 {
    loop {
        let x = 1.5 * normal(rng);
        if points.iter().all(|p| (p - x).abs() > margin) {
            return x;
        }
    }
}

/// Normwise relative error `max|a - b| / max|b|`.
pub fn normwise(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn pairing(y: &Matrix, w: &Matrix) -> f64 {
    y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
}

pub struct GradReport {
    pub instances: usize,
    pub d_params: f64,
    pub d_input: f64,
}

/// Central differences (step 1e-6) of `<forward(X), W>` against the layer
/// backward pass for `instances` random layers with interior inputs.
pub fn layer_gradients(instances: usize, seed: u64) -> GradReport {
    let mut rng = stream(seed, Stream::Data);
    let h = 1e-6;
    let (mut wp, mut wx): (f64, f64) = (0.0, 0.0);
    for k in 0..instances {
        let g = [3, 4, 5, 8, 12][k % 5];
        let n_in = 2 * rng.random_range(1..=3);
        let n_out = rng.random_range(1..=3);
        let mut layer = LmKanLayer::init(n_in, n_out, g, seed + k as u64, None).unwrap();
        layer.set_gamma(0.5 + rng.random::<f64>());
        let pts = layer.grid().points().to_vec();
        let x = Matrix::from_fn(8, n_in, |_, _| off_node(&mut rng, &pts, 1e-4));
        let w = normal_matrix(&mut rng, 8, n_out);
        let grads = layer.backward(&x, &w).unwrap();

        let mut fd = vec![0.0; layer.param_count()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut a = layer.clone();
            a.params_mut()[i] += h;
            let mut b = layer.clone();
            b.params_mut()[i] -= h;
            *slot = (pairing(&a.forward(&x).unwrap(), &w) - pairing(&b.forward(&x).unwrap(), &w)) / (2.0 * h);
        }
        wp = wp.max(normwise(&grads.d_params, &fd));

        let mut fdx = vec![0.0; x.as_slice().len()];
        for (i, slot) in fdx.iter_mut().enumerate() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.as_mut_slice()[i] += h;
            b.as_mut_slice()[i] -= h;
            *slot = (pairing(&layer.forward(&a).unwrap(), &w) - pairing(&layer.forward(&b).unwrap(), &w)) / (2.0 * h);
        }
        wx = wx.max(normwise(grads.d_input.as_slice(), &fdx));
    }
    GradReport {
        instances,
        d_params: wp,
        d_input: wx,
    }
}

/// Central differences of the sheet penalty against its analytic gradient.
pub fn hessian_gradients(instances: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, Stream::Data);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let g = [3, 4, 12][k % 3];
        let grid = SigmaGrid::new(g).unwrap();
        let f = random_sheet(&grid, &mut rng);
        let grad = hessian_penalty_grad(&grid, &f).unwrap();
        let mut fd = vec![0.0; f.coeffs().len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let (mut a, mut b) = (f.clone(), f.clone());
            a.coeffs_mut()[i] += h;
            b.coeffs_mut()[i] -= h;
            *slot = (hessian_penalty(&grid, &a).unwrap() - hessian_penalty(&grid, &b).unwrap()) / (2.0 * h);
        }
        worst = worst.max(normwise(grad.coeffs(), &fd));
    }
    worst
}

pub struct HessianReport {
    /// Max `|penalty - (4a^2 + 2b^2 + 4c^2)|` over quadratic sheets.
    pub quadratic_abs: f64,
    /// Max penalty over linear sheets.
    pub linear_max: f64,
}

pub fn hessian_exactness(trials: usize, seed: u64) -> HessianReport {
    let mut rng = stream(seed, Stream::Data);
    let mut rep = HessianReport {
        quadratic_abs: 0.0,
        linear_max: 0.0,
    };
    for g in [3, 4, 12] {
        let grid = SigmaGrid::new(g).unwrap();
        for _ in 0..trials {
            let (a, b, c) = (normal(&mut rng), normal(&mut rng), normal(&mut rng));
            let (d, e, k) = (normal(&mut rng), normal(&mut rng), normal(&mut rng));
            let q = Func2D::from_node_fn(&grid, |x, y| a * x * x + b * x * y + c * y * y + d * x + e * y + k);
            let want = 4.0 * a * a + 2.0 * b * b + 4.0 * c * c;
            rep.quadratic_abs = rep.quadratic_abs.max((hessian_penalty(&grid, &q).unwrap() - want).abs());
            let l = Func2D::from_node_fn(&grid, |x, y| d * x + e * y + k);
            rep.linear_max = rep.linear_max.max(hessian_penalty(&grid, &l).unwrap());
        }
    }
    rep
}

/// ReLU-first student with populated batch-norm statistics and `gamma = 0.3`.
pub fn trained_like_model(g: usize, seed: u64) -> Model {
    let mut m = Model::lmkan(&LmKanSpec {
        in_dim: 8,
        hidden_dim: 16,
        out_dim: 3,
        hidden_layers: 2,
        grid: g,
        precond: PrecondMode::ReluFirst,
        init_scale: None,
        input_norm: false,
        seed,
    })
    .unwrap();
    m.set_gamma(0.3);
    let mut rng = stream(seed, Stream::Data);
    for _ in 0..5 {
        let x = normal_matrix(&mut rng, 128, 8);
        m.forward_train(&x).unwrap();
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tails {
    /// Standard normal rows only.
    None,
    /// One coordinate per tail row set to `+-1e3`.
    One,
    /// Every coordinate of a tail row set to `+-1e3`.
    All,
}

/// `10^4` rows: 9,900 standard normal rows and 100 tail rows.
pub fn probe_rows(seed: u64, cols: usize, tails: Tails) -> Matrix {
    let mut rng = stream(seed, Stream::Eval);
    let mut x = normal_matrix(&mut rng, 10_000, cols);
    let side = |r: &mut StreamRng| if r.random::<bool>() { 1e3 } else { -1e3 };
    for r in 9_900..10_000 {
        match tails {
            Tails::None => {}
            Tails::One => {
                let c = rng.random_range(0..cols);
                let v = side(&mut rng);
                x.set(r, c, v);
            }
            Tails::All => {
                for c in 0..cols {
                    let v = side(&mut rng);
                    x.set(r, c, v);
                }
            }
        }
    }
    x
}

/// Max abs difference and max output magnitude.
pub fn compare(got: &Matrix, want: &Matrix) -> (f64, f64) {
    let scale = want.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (got.max_abs_diff(want), scale)
}

/// ReLU-first block (8 -> 6, `gamma = 0.3`) followed by a populated batch
/// norm, and its fused pure layer.
pub fn relu_first_bn_block(g: usize, seed: u64) -> (PrecondBlock, lmkan::batchnorm::BatchNorm, LmKanLayer) {
    let mut layer = LmKanLayer::init(8, 6, g, seed, None).unwrap();
    layer.set_gamma(0.3);
    let lin = Linear::init_uniform(8, 6, &mut stream(seed, Stream::Init));
    let block = PrecondBlock::new(layer, Some(lin), PrecondMode::ReluFirst).unwrap();
    let mut bn = lmkan::batchnorm::BatchNorm::plain(6);
    let mut rng = stream(seed, Stream::Data);
    for _ in 0..5 {
        let x = normal_matrix(&mut rng, 128, 8);
        bn.apply(&block.forward(&x).unwrap(), true).unwrap();
    }
    let fused = lmkan::fusion::fuse_output_batchnorm(&lmkan::fusion::fuse_block(&block).unwrap(), &bn).unwrap();
    (block, bn, fused)
}

/// `(max abs diff, max |y|)` of block-level fusion on the given rows.
pub fn block_fusion_error(g: usize, seed: u64, tails: Tails) -> (f64, f64) {
    let (block, bn, fused) = relu_first_bn_block(g, seed);
    let x = probe_rows(seed, 8, tails);
    compare(&fused.forward(&x).unwrap(), &bn.infer(&block.forward(&x).unwrap()).unwrap())
}

/// `(max abs diff, max |y|)` of whole-model fusion on the given rows.
pub fn model_fusion_error(g: usize, seed: u64, tails: Tails) -> (f64, f64) {
    let m = trained_like_model(g, seed);
    let (fused, report) = m.fuse().unwrap();
    assert!(report.unfused_relu_last.is_empty());
    assert!(fused.is_fused());
    let x = probe_rows(seed, 8, tails);
    compare(&fused.forward(&x).unwrap(), &m.forward(&x).unwrap())
}

pub struct ReluReport {
    /// Max abs error over probes inside `[-10, 10]^2`.
    pub abs: f64,
    /// Max error relative to the lookup rounding scale over all probes.
    pub conditioned: f64,
}

/// A relu_first block whose lmKAN part is zero and whose branch is
/// `ReLU(x1)`; after fusion the single function must be exactly `ReLU(x1)`.
pub fn relu_representability(g: usize, seed: u64) -> ReluReport {
    let mut layer = LmKanLayer::zeros(2, 1, g).unwrap();
    layer.set_gamma(0.0);
    let lin = Linear::from_parts(2, 1, vec![1.0, 0.0], vec![0.0]).unwrap();
    let block = PrecondBlock::new(layer, Some(lin), PrecondMode::ReluFirst).unwrap();
    let fused = lmkan::fusion::fuse_block(&block).unwrap();
    let f = fused.function(0, 0);
    let grid = fused.grid();
    let mut rng = stream(seed, Stream::Eval);
    let p = grid.points().to_vec();
    let mut rep = ReluReport {
        abs: 0.0,
        conditioned: 0.0,
    };
    for _ in 0..10_000 {
        let (x1, x2) = (probe(&mut rng, &p), probe(&mut rng, &p));
        let want = x1.max(0.0);
        let err = (eval2d(grid, &f, x1, x2) - want).abs();
        let (_, scale) = oracle_eval(&p, f.coeffs(), x1, x2);
        rep.conditioned = rep.conditioned.max(err / scale.max(want).max(f64::MIN_POSITIVE));
        if x1.abs().max(x2.abs()) <= 10.0 {
            rep.abs = rep.abs.max(err);
        }
    }
    rep
}

/// Random small model of either family, with populated normalization stats.
pub fn random_model(rng: &mut StreamRng) -> Model {
    let seed = rng.random::<u64>();
    let mut m = if rng.random::<bool>() {
        let modes = [PrecondMode::ReluFirst, PrecondMode::ReluLast, PrecondMode::Linear, PrecondMode::None];
        Model::lmkan(&LmKanSpec {
            in_dim: 2 * rng.random_range(1..=3),
            hidden_dim: 2 * rng.random_range(1..=4),
            out_dim: rng.random_range(1..=3),
            hidden_layers: rng.random_range(0..=2),
            grid: rng.random_range(3..=9),
            precond: modes[rng.random_range(0..4)],
            init_scale: None,
            input_norm: rng.random::<bool>(),
            seed,
        })
        .unwrap()
    } else {
        Model::mlp(&MlpSpec {
            in_dim: rng.random_range(1..=5),
            hidden_dim: rng.random_range(1..=7),
            out_dim: rng.random_range(1..=3),
            hidden_layers: rng.random_range(0..=2),
            activation: if rng.random::<bool>() { Activation::Relu } else { Activation::Tanh },
            batch_norm: rng.random::<bool>(),
            seed,
        })
        .unwrap()
    };
    m.set_gamma(rng.random::<f64>());
    for b in m.blocks_mut() {
        let norm = match b {
            Block::Norm(bn) => Some(bn),
            Block::LmKan { norm, .. } | Block::Dense { norm, .. } => norm.as_mut(),
        };
        if let Some(bn) = norm {
            let d = bn.dim();
            let mean = (0..d).map(|_| normal(rng)).collect();
            let var = (0..d).map(|_| rng.random::<f64>() * 3.0).collect();
            bn.state = BatchNormState::with_stats(mean, var, 1e-5).unwrap();
            if let Some(a) = &mut bn.affine {
                a.weight.iter_mut().for_each(|w| *w = normal(rng));
                a.bias.iter_mut().for_each(|w| *w = normal(rng));
            }
        }
    }
    m
}

fn bits(m: &Model) -> Vec<u64> {
    m.params().iter().flat_map(|s| s.iter().map(|v| v.to_bits())).collect()
}

/// Randomized f64 round trips; returns the number that were bitwise exact.
pub fn roundtrips(n: usize, seed: u64) -> usize {
    let mut rng = stream(seed, Stream::Data);
    let mut exact = 0;
    for _ in 0..n {
        let m = random_model(&mut rng);
        let bytes = encode_model(&m, DType::F64).unwrap();
        let (back, dtype) = decode_model(&bytes).unwrap();
        let x = normal_matrix(&mut rng, 4, m.in_dim());
        let same_out = m
            .forward(&x)
            .unwrap()
            .as_slice()
            .iter()
            .zip(back.forward(&x).unwrap().as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if dtype == DType::F64
            && bits(&m) == bits(&back)
            && encode_model(&back, DType::F64).unwrap() == bytes
            && same_out
        {
            exact += 1;
        }
    }
    exact
}

/// Corrupted variants of one encoded model; returns how many were rejected
/// and how many were tried.
pub fn corruption_rejections(seed: u64) -> (usize, usize) {
    let mut rng = stream(seed, Stream::Data);
    let m = loop {
        let m = random_model(&mut rng);
        if m.is_lmkan() {
            break m;
        }
    };
    let good = encode_model(&m, DType::F64).unwrap();
    let mut variants: Vec<Vec<u8>> = Vec::new();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    variants.push(bad_magic);
    for cut in [0, 3, 7, good.len() / 2, good.len() - 1] {
        variants.push(good[..cut].to_vec());
    }
    let mut trailing = good.clone();
    trailing.push(0);
    variants.push(trailing);
    for _ in 0..50 {
        let mut v = good.clone();
        let payload_start = good.len() - 8 * m.params().iter().map(|s| s.len()).sum::<usize>();
        let at = rng.random_range(payload_start..good.len());
        v[at] ^= 1 << rng.random_range(0..8);
        variants.push(v);
    }
    let header_len = u32::from_le_bytes(good[4..8].try_into().unwrap()) as usize;
    let mut huge = good.clone();
    huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
    variants.push(huge);
    let header = std::str::from_utf8(&good[8..8 + header_len]).unwrap();
    for (from, to) in [("\"version\":1", "\"version\":9"), ("\"f64\"", "\"f16\"")] {
        if header.contains(from) {
            let mut v = good[..8].to_vec();
            let h = header.replacen(from, to, 1);
            v[4..8].copy_from_slice(&(h.len() as u32).to_le_bytes());
            v.extend_from_slice(h.as_bytes());
            v.extend_from_slice(&good[8 + header_len..]);
            variants.push(v);
        }
    }
    let tried = variants.len();
    let rejected = variants.iter().filter(|v| decode_model(v).is_err()).count();
    (rejected, tried)
}

/// Max per-sheet plane-fit ratio over every function of every lmKAN layer.
pub fn worst_plane_fit(model: &Model) -> f64 {
    let mut worst: f64 = 0.0;
    for layer in model.lmkan_layers() {
        for p in 0..layer.pairs() {
            for q in 0..layer.n_out() {
                let (ratio, _) = plane_fit(layer.grid(), &layer.function(p, q)).unwrap();
                worst = worst.max(ratio);
            }
        }
    }
    worst
}
